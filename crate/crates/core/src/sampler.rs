//! Fixed-step explicit Runge-Kutta integration of `dx/dt = v(x, t)`.
//!
//! Two drivers share one stepping routine: [`integrate`] runs on the autodiff
//! tape so the result is differentiable, and [`integrate_values`] works on
//! plain tensors, split into row chunks that are processed in parallel.

use std::io::Write;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GenerativeModel;
use crate::numerics::{Tensor, Var};
use crate::par;

/// Rows per parallel work item in [`integrate_values`].
pub const CHUNK_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Midpoint,
    #[serde(rename = "rk4_38")]
    Rk4_38,
}

impl Scheme {
    pub fn order(self) -> usize {
        match self {
            Scheme::Euler => 1,
            Scheme::Midpoint => 2,
            Scheme::Rk4_38 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Midpoint => "midpoint",
            Scheme::Rk4_38 => "rk4_38",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Scheme::Euler),
            "midpoint" => Ok(Scheme::Midpoint),
            "rk4_38" | "rk4" => Ok(Scheme::Rk4_38),
            _ => Err(Error::InvalidArgument(format!("unknown solver scheme '{s}'"))),
        }
    }

    // (c, a, b) Butcher tableau; `a[i]` holds the coefficients of stage i.
    fn tableau(self) -> (&'static [f64], &'static [&'static [f64]], &'static [f64]) {
        match self {
            Scheme::Euler => (&[0.0], &[&[]], &[1.0]),
            Scheme::Midpoint => (&[0.0, 0.5], &[&[], &[0.5]], &[0.0, 1.0]),
            Scheme::Rk4_38 => (
                &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
                &[&[], &[1.0 / 3.0], &[-1.0 / 3.0, 1.0], &[1.0, -1.0, 1.0]],
                &[0.125, 0.375, 0.375, 0.125],
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSpec {
    pub scheme: Scheme,
    pub steps: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self { scheme: Scheme::Euler, steps: 32 }
    }
}

impl SolverSpec {
    pub fn new(scheme: Scheme, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("solver needs at least one step".into()));
        }
        Ok(Self { scheme, steps })
    }

    /// Uniform grid `t_0 = start, ..., t_T = end` (end hit exactly).
    pub fn grid(&self, start: f64, end: f64) -> Vec<f64> {
        let h = (end - start) / self.steps as f64;
        (0..=self.steps)
            .map(|k| if k == self.steps { end } else { start + k as f64 * h })
            .collect()
    }
}

/// Ordered `(t_k, x_k)` pairs of a batch of integrations, `k = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&Tensor> {
        self.states.last()
    }

    /// Writes `sample_id,k,t,x0,..` rows, one per sample and grid point.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.states.first().map_or(0, Tensor::cols);
        let mut header = vec!["sample_id".to_string(), "k".into(), "t".into()];
        header.extend((0..dim).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        let n = self.states.first().map_or(0, Tensor::rows);
        for i in 0..n {
            for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
                let mut rec = vec![i.to_string(), k.to_string(), t.to_string()];
                rec.extend(x.row(i).iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Velocity field evaluated on the autodiff tape.
pub trait VectorField<'t> {
    fn velocity(&self, x: Var<'t>, t: f64) -> Result<Var<'t>>;

    /// Velocity together with `(∂v/∂x)·d` for each tangent `d`.
    fn velocity_jvp(&self, _x: Var<'t>, _t: f64, _tangents: &[Var<'t>]) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        Err(Error::Unsupported("this field does not provide Jacobian-vector products".into()))
    }
}

impl<'t, F: Fn(Var<'t>, f64) -> Result<Var<'t>>> VectorField<'t> for F {
    fn velocity(&self, x: Var<'t>, t: f64) -> Result<Var<'t>> {
        self(x, t)
    }
}

/// `v(x) = x·Aᵀ`, i.e. `dx/dt = A x` for each row.
pub struct LinearField {
    pub a: Tensor,
}

impl<'t> VectorField<'t> for LinearField {
    fn velocity(&self, x: Var<'t>, _t: f64) -> Result<Var<'t>> {
        Ok(x.matmul(x.tape().constant(self.a.transpose())))
    }

    fn velocity_jvp(&self, x: Var<'t>, t: f64, tangents: &[Var<'t>]) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let at = x.tape().constant(self.a.transpose());
        Ok((self.velocity(x, t)?, tangents.iter().map(|&d| d.matmul(at)).collect()))
    }
}

/// Constant velocity `c` (a `[1, d]` row broadcast over the batch).
pub struct ConstantField {
    pub c: Vec<f64>,
}

impl<'t> VectorField<'t> for ConstantField {
    fn velocity(&self, x: Var<'t>, _t: f64) -> Result<Var<'t>> {
        let (rows, cols) = x.value().dims2();
        if cols != self.c.len() {
            return Err(Error::shape("ConstantField", format!("{cols} columns, field has {}", self.c.len())));
        }
        let row = Tensor::matrix(1, cols, self.c.clone())?;
        Ok(x.tape().constant(row).broadcast_to(rows, cols))
    }

    fn velocity_jvp(&self, x: Var<'t>, t: f64, tangents: &[Var<'t>]) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let zero = x.tape().constant(Tensor::zeros(&x.shape()));
        Ok((self.velocity(x, t)?, vec![zero; tangents.len()]))
    }
}

/// Velocity field on plain tensors. `rows` locates `x` within the full batch
/// so per-row inputs such as conditions can be sliced to match.
pub trait TensorField: Sync {
    fn velocity(&self, x: &Tensor, t: f64, rows: Range<usize>) -> Result<Tensor>;
}

impl TensorField for Tensor {
    /// Linear field `dx/dt = A x` with `self` as `A`.
    fn velocity(&self, x: &Tensor, _t: f64, _rows: Range<usize>) -> Result<Tensor> {
        x.matmul(&self.transpose())
    }
}

pub(crate) trait OdeState: Sized {
    /// `self + Σ c_i·k_i`.
    fn combine(&self, terms: &[(f64, &Self)]) -> Result<Self>;
    fn all_finite(&self) -> bool;
}

impl OdeState for Tensor {
    fn combine(&self, terms: &[(f64, &Self)]) -> Result<Self> {
        let mut out = self.clone();
        for (c, k) in terms {
            if k.shape() != self.shape() {
                return Err(Error::shape("integrate", format!("{:?} vs {:?}", k.shape(), self.shape())));
            }
            for (o, v) in out.data_mut().iter_mut().zip(k.data()) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    fn all_finite(&self) -> bool {
        Tensor::all_finite(self)
    }
}

impl<'t> OdeState for Vec<Var<'t>> {
    fn combine(&self, terms: &[(f64, &Self)]) -> Result<Self> {
        Ok(self
            .iter()
            .enumerate()
            .map(|(i, &y)| terms.iter().fold(y, |acc, (c, k)| acc + k[i].scale(*c)))
            .collect())
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.value().all_finite())
    }
}

fn rk_step<S: OdeState>(
    scheme: Scheme,
    f: &mut impl FnMut(&S, f64) -> Result<S>,
    y: &S,
    t: f64,
    h: f64,
) -> Result<S> {
    let (c, a, b) = scheme.tableau();
    let mut ks: Vec<S> = Vec::with_capacity(c.len());
    for i in 0..c.len() {
        let k = if i == 0 {
            f(y, t)?
        } else {
            let terms: Vec<(f64, &S)> =
                a[i].iter().zip(&ks).filter(|(aij, _)| **aij != 0.0).map(|(aij, k)| (h * aij, k)).collect();
            f(&y.combine(&terms)?, t + c[i] * h)?
        };
        ks.push(k);
    }
    let terms: Vec<(f64, &S)> = b.iter().zip(&ks).filter(|(bi, _)| **bi != 0.0).map(|(bi, k)| (h * bi, k)).collect();
    y.combine(&terms)
}

/// Integrates from `t0` to `t1` (either direction), calling `on_step(k, t_k, y_k)`
/// at every grid point including the initial one.
pub(crate) fn solve<S: OdeState>(
    spec: &SolverSpec,
    t0: f64,
    t1: f64,
    y0: S,
    mut f: impl FnMut(&S, f64) -> Result<S>,
    mut on_step: impl FnMut(usize, f64, &S),
) -> Result<S> {
    if spec.steps == 0 {
        return Err(Error::InvalidArgument("solver needs at least one step".into()));
    }
    if !y0.all_finite() {
        return Err(Error::NonFinite("initial state".into()));
    }
    let grid = spec.grid(t0, t1);
    on_step(0, grid[0], &y0);
    let mut y = y0;
    for k in 0..spec.steps {
        let h = grid[k + 1] - grid[k];
        y = match rk_step(spec.scheme, &mut f, &y, grid[k], h) {
            Err(e) if e.is_numeric() => return Err(Error::Diverged { step: k + 1 }),
            other => other?,
        };
        if !y.all_finite() {
            return Err(Error::Diverged { step: k + 1 });
        }
        on_step(k + 1, grid[k + 1], &y);
    }
    Ok(y)
}

/// Differentiable integration of `field` from `t0` to `t1`.
pub fn integrate<'t, F: VectorField<'t> + ?Sized>(
    field: &F,
    x_init: Var<'t>,
    spec: &SolverSpec,
    t0: f64,
    t1: f64,
    record: bool,
) -> Result<(Var<'t>, Option<Trajectory>)> {
    let mut traj = record.then(|| Trajectory { times: Vec::new(), states: Vec::new() });
    let out = solve(
        spec,
        t0,
        t1,
        vec![x_init],
        |y: &Vec<Var<'t>>, t| Ok(vec![field.velocity(y[0], t)?]),
        |_, t, y| {
            if let Some(tr) = traj.as_mut() {
                tr.times.push(t);
                tr.states.push(y[0].to_tensor());
            }
        },
    )?;
    Ok((out[0], traj))
}

/// Tape-free integration; rows are processed in chunks of [`CHUNK_ROWS`] in parallel.
pub fn integrate_values<F: TensorField + ?Sized>(
    field: &F,
    x_init: &Tensor,
    spec: &SolverSpec,
    t0: f64,
    t1: f64,
    record: bool,
) -> Result<(Tensor, Option<Trajectory>)> {
    let n = x_init.rows();
    let chunks = n.div_ceil(CHUNK_ROWS);
    let parts = par::map_range(chunks, |ci| {
        let rows = ci * CHUNK_ROWS..((ci + 1) * CHUNK_ROWS).min(n);
        let x0 = x_init.slice_rows(rows.start, rows.end);
        let mut states = Vec::new();
        let out = solve(
            spec,
            t0,
            t1,
            x0,
            |y: &Tensor, t| field.velocity(y, t, rows.clone()),
            |_, _, y| {
                if record {
                    states.push(y.clone());
                }
            },
        )?;
        Ok::<_, Error>((out, states))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        let (out, states) = parts.into_iter().next().unwrap();
        let traj = record.then(|| Trajectory { times: spec.grid(t0, t1), states });
        return Ok((out, traj));
    }
    let finals: Vec<Tensor> = parts.iter().map(|p| p.0.clone()).collect();
    let out = if finals.is_empty() { Tensor::zeros(&[0, x_init.cols()]) } else { Tensor::vstack(&finals)? };
    let traj = if record {
        let states = (0..=spec.steps)
            .map(|k| {
                if parts.is_empty() {
                    Ok(Tensor::zeros(&[0, x_init.cols()]))
                } else {
                    Tensor::vstack(&parts.iter().map(|p| p.1[k].clone()).collect::<Vec<_>>())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Some(Trajectory { times: spec.grid(t0, t1), states })
    } else {
        None
    };
    Ok((out, traj))
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub samples: Tensor,
    pub trajectory: Option<Trajectory>,
}

/// Draws `n` standard-normal prior points and integrates them to data time.
/// `cond`, when the model is conditional, must have `n` rows.
pub fn generate<R: Rng + ?Sized>(
    model: &GenerativeModel,
    n: usize,
    spec: &SolverSpec,
    cond: Option<&Tensor>,
    rng: &mut R,
    record: bool,
) -> Result<Generated> {
    let d = model.x_dim();
    if n == 0 {
        let empty = Tensor::zeros(&[0, d]);
        return Ok(Generated { trajectory: record.then(|| Trajectory { times: vec![], states: vec![] }), samples: empty });
    }
    if let Some(c) = cond {
        if c.rows() != n || c.cols() != model.cond_dim() {
            return Err(Error::shape("generate", format!("condition {:?} for {n} samples", c.shape())));
        }
    }
    let z = Tensor::randn(&[n, d], rng);
    let sched = model.schedule();
    let (samples, trajectory) =
        integrate_values(&model.value_field(cond), &z, spec, sched.prior_time(), sched.data_time(), record)?;
    Ok(Generated { samples, trajectory })
}

/// Differentiable generation from given prior points `z`.
pub fn generate_from<'t>(
    model: &GenerativeModel,
    params: &[Var<'t>],
    z: Var<'t>,
    cond: Option<Var<'t>>,
    spec: &SolverSpec,
) -> Result<Var<'t>> {
    let sched = model.schedule();
    let field = model.field(params, cond);
    Ok(integrate(&field, z, spec, sched.prior_time(), sched.data_time(), false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exp_error(scheme: Scheme, steps: usize) -> f64 {
        let tape = Tape::new();
        fn field<'t>(x: Var<'t>, _t: f64) -> Result<Var<'t>> {
            Ok(x)
        }
        let spec = SolverSpec::new(scheme, steps).unwrap();
        let (x, _) = integrate(&field, tape.constant(Tensor::scalar(1.0).reshape(vec![1, 1]).unwrap()), &spec, 0.0, 1.0, false)
            .unwrap();
        (x.item() - std::f64::consts::E).abs()
    }

    #[test]
    fn rk4_hits_e() {
        assert!(exp_error(Scheme::Rk4_38, 32) < 1e-6);
    }

    #[test]
    fn convergence_orders() {
        for (scheme, lo, hi) in [(Scheme::Euler, 0.9, 1.1), (Scheme::Midpoint, 1.8, 2.2), (Scheme::Rk4_38, 3.8, 4.5)] {
            let e1 = exp_error(scheme, 16);
            let e2 = exp_error(scheme, 32);
            let e3 = exp_error(scheme, 64);
            let p1 = (e1 / e2).log2();
            let p2 = (e2 / e3).log2();
            assert!(p1 > lo && p1 < hi && p2 > lo && p2 < hi, "{scheme:?}: {p1} {p2}");
        }
    }

    #[test]
    fn zero_field_is_identity_with_identity_jacobian() {
        let tape = Tape::new();
        let x0 = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let x = tape.leaf(x0.clone());
        for scheme in [Scheme::Euler, Scheme::Midpoint, Scheme::Rk4_38] {
            for steps in [1, 7] {
                let (out, _) = integrate(&ConstantField { c: vec![0.0, 0.0] }, x, &SolverSpec::new(scheme, steps).unwrap(), 1.0, 0.0, false)
                    .unwrap();
                assert_eq!(out.to_tensor(), x0);
            }
        }
        // Jacobian column by column.
        let spec = SolverSpec::new(Scheme::Rk4_38, 4).unwrap();
        for j in 0..2 {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let (out, _) = integrate(&ConstantField { c: vec![0.0, 0.0] }, x, &spec, 0.0, 1.0, false).unwrap();
            let g = tape.backward(out.slice_cols(j, j + 1).sum()).unwrap().wrt(x);
            let mut e = vec![0.0; 2];
            e[j] = 1.0;
            assert_eq!(g.data(), &e[..]);
        }
    }

    #[test]
    fn linear_field_matches_matrix_exponential() {
        // A = [[0, 1], [-1, 0]] rotates: exp(A) x0 = (cos1 x + sin1 y, -sin1 x + cos1 y).
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let x0 = Tensor::from_rows(&[vec![1.0, 0.5]]).unwrap();
        let (c, s) = (1f64.cos(), 1f64.sin());
        let exact = [c * 1.0 + s * 0.5, -s * 1.0 + c * 0.5];
        for (scheme, tol) in [(Scheme::Euler, 0.05), (Scheme::Midpoint, 5e-4), (Scheme::Rk4_38, 1e-8)] {
            let spec = SolverSpec::new(scheme, 64).unwrap();
            let (x, _) = integrate_values(&a, &x0, &spec, 0.0, 1.0, false).unwrap();
            let err = (x.get(0, 0) - exact[0]).abs().max((x.get(0, 1) - exact[1]).abs());
            assert!(err < tol, "{scheme:?}: {err}");
            let tape = Tape::new();
            let (y, _) = integrate(&LinearField { a: a.clone() }, tape.constant(x0.clone()), &spec, 0.0, 1.0, false).unwrap();
            assert!(y.value().max_abs_diff(&x) < 1e-12);
        }
    }

    #[test]
    fn recording_matches_plain_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 3], &mut rng);
        let x0 = Tensor::randn(&[600, 3], &mut rng);
        let spec = SolverSpec::new(Scheme::Midpoint, 10).unwrap();
        let (plain, none) = integrate_values(&a, &x0, &spec, 1.0, 0.0, false).unwrap();
        let (rec, traj) = integrate_values(&a, &x0, &spec, 1.0, 0.0, true).unwrap();
        assert!(none.is_none());
        let traj = traj.unwrap();
        assert_eq!(plain, rec);
        assert_eq!(traj.len(), 11);
        assert_eq!(traj.states[0], x0);
        assert_eq!(traj.last().unwrap(), &plain);
        assert!(traj.times.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn divergence_reports_step() {
        let tape = Tape::new();
        fn field<'t>(x: Var<'t>, _t: f64) -> Result<Var<'t>> {
            Ok(x.square().scale(1e200))
        }
        let spec = SolverSpec::new(Scheme::Euler, 10).unwrap();
        let err = integrate(&field, tape.constant(Tensor::full(&[1, 1], 1.0)), &spec, 0.0, 1.0, false).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 2 }), "{err:?}");
    }

    #[test]
    fn trajectory_csv_layout() {
        let traj = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![Tensor::zeros(&[2, 2]), Tensor::ones(&[2, 2])],
        };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,k,t,x0,x1");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "1,1,1,1,1");
    }
}
