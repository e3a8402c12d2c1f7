//! Log-densities of flow models via the instantaneous change of variables:
//! integrate `[x, ℓ]` with `dℓ/dt = Tr(∂v/∂x)` from data time to prior time,
//! then `log p(x) = log N(x_prior; 0, I) + ℓ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GenerativeModel;
use crate::numerics::{Tape, Tensor, Var};
use crate::par;
use crate::sampler::{solve, SolverSpec, VectorField, CHUNK_ROWS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeDist {
    #[default]
    Gaussian,
    Rademacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TraceMode {
    Exact,
    Hutchinson {
        probes: usize,
        #[serde(default)]
        dist: ProbeDist,
    },
}

impl Default for TraceMode {
    fn default() -> Self {
        TraceMode::Exact
    }
}

impl TraceMode {
    pub fn hutchinson(probes: usize) -> Self {
        TraceMode::Hutchinson { probes, dist: ProbeDist::Gaussian }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TraceMode::Hutchinson { probes: 0, .. } => {
                Err(Error::InvalidArgument("Hutchinson estimation needs at least one probe".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-row trace estimate `[n, 1]`; `stderr` is set for Hutchinson with two
/// or more probes.
#[derive(Clone, Debug)]
pub struct TraceEstimate<'t> {
    pub value: Var<'t>,
    pub stderr: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LogDensity<'t> {
    /// Point reached at prior time.
    pub terminal: Var<'t>,
    /// `[n, 1]` log-density in nats.
    pub log_prob: Var<'t>,
    pub trace_mode: TraceMode,
    /// Standard error of the Hutchinson estimate across probes, `[n, 1]`.
    pub stderr: Option<Tensor>,
}

fn draw_probes<R: Rng + ?Sized>(mode: &TraceMode, rows: usize, dim: usize, rng: &mut R) -> Vec<Tensor> {
    match *mode {
        TraceMode::Exact => (0..dim)
            .map(|j| {
                let mut e = Tensor::zeros(&[rows, dim]);
                for r in 0..rows {
                    e.data_mut()[r * dim + j] = 1.0;
                }
                e
            })
            .collect(),
        TraceMode::Hutchinson { probes, dist } => (0..probes)
            .map(|_| match dist {
                ProbeDist::Gaussian => Tensor::randn(&[rows, dim], rng),
                ProbeDist::Rademacher => {
                    let data = (0..rows * dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                    Tensor::matrix(rows, dim, data).expect("probe shape")
                }
            })
            .collect(),
    }
}

/// Per-probe `εᵀ(∂v/∂x)ε` columns (exact mode: one column per diagonal entry).
fn probe_terms<'t, F: VectorField<'t> + ?Sized>(
    field: &F,
    x: Var<'t>,
    t: f64,
    probes: &[Var<'t>],
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let (v, jvps) = field.velocity_jvp(x, t, probes)?;
    let terms = probes.iter().zip(jvps).map(|(&e, j)| (e * j).sum_cols()).collect();
    Ok((v, terms))
}

fn stderr_of(estimates: &[Var<'_>]) -> Option<Tensor> {
    let p = estimates.len();
    if p < 2 {
        return None;
    }
    let rows = estimates[0].value().rows();
    let vals: Vec<_> = estimates.iter().map(|e| e.value()).collect();
    let out = (0..rows)
        .map(|r| {
            let mean = vals.iter().map(|v| v.data()[r]).sum::<f64>() / p as f64;
            let var = vals.iter().map(|v| (v.data()[r] - mean).powi(2)).sum::<f64>() / (p - 1) as f64;
            (var / p as f64).sqrt()
        })
        .collect();
    Some(Tensor::column(out))
}

fn mean_of<'t>(terms: &[Var<'t>]) -> Var<'t> {
    let sum = terms[1..].iter().fold(terms[0], |acc, &t| acc + t);
    if terms.len() == 1 {
        sum
    } else {
        sum.scale(1.0 / terms.len() as f64)
    }
}

/// `Tr(∂v/∂x)` per row at time `t`.
pub fn jacobian_trace<'t, F: VectorField<'t> + ?Sized, R: Rng + ?Sized>(
    field: &F,
    x: Var<'t>,
    t: f64,
    mode: &TraceMode,
    rng: &mut R,
) -> Result<TraceEstimate<'t>> {
    mode.validate()?;
    let (rows, dim) = x.value().dims2();
    let tape = x.tape();
    let probes: Vec<Var<'t>> = draw_probes(mode, rows, dim, rng).into_iter().map(|p| tape.constant(p)).collect();
    let (_, terms) = probe_terms(field, x, t, &probes)?;
    let value = match mode {
        TraceMode::Exact => terms[1..].iter().fold(terms[0], |acc, &t| acc + t),
        TraceMode::Hutchinson { .. } => mean_of(&terms),
    };
    if !value.value().all_finite() {
        return Err(Error::NonFinite("Jacobian trace".into()));
    }
    let stderr = match mode {
        TraceMode::Exact => None,
        TraceMode::Hutchinson { .. } => stderr_of(&terms),
    };
    Ok(TraceEstimate { value, stderr })
}

/// `log N(x; 0, I)` per row as a `[n, 1]` column.
pub fn standard_normal_log_density<'t>(x: Var<'t>) -> Var<'t> {
    let d = x.value().cols() as f64;
    x.square().sum_cols().scale(-0.5).add_scalar(-0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

/// Log-density of `x` under the flow `field`, integrating from `t_data` to
/// `t_prior`. Hutchinson probes are drawn once and held fixed along the path;
/// each probe carries its own accumulator so the spread across probes gives a
/// standard error.
pub fn log_prob_field<'t, F: VectorField<'t> + ?Sized, R: Rng + ?Sized>(
    field: &F,
    x: Var<'t>,
    t_data: f64,
    t_prior: f64,
    spec: &SolverSpec,
    mode: &TraceMode,
    rng: &mut R,
) -> Result<LogDensity<'t>> {
    mode.validate()?;
    let (rows, dim) = x.value().dims2();
    let tape = x.tape();
    let probes: Vec<Var<'t>> = draw_probes(mode, rows, dim, rng).into_iter().map(|p| tape.constant(p)).collect();
    let n_acc = match mode {
        TraceMode::Exact => 1,
        TraceMode::Hutchinson { probes, .. } => *probes,
    };
    let mut y0 = vec![x];
    let zero = tape.constant(Tensor::zeros(&[rows, 1]));
    y0.extend(std::iter::repeat_n(zero, n_acc));
    let out = solve(
        spec,
        t_data,
        t_prior,
        y0,
        |y: &Vec<Var<'t>>, t| {
            let (v, terms) = probe_terms(field, y[0], t, &probes)?;
            let mut dy = vec![v];
            match mode {
                TraceMode::Exact => dy.push(terms[1..].iter().fold(terms[0], |acc, &t| acc + t)),
                TraceMode::Hutchinson { .. } => dy.extend(terms),
            }
            Ok(dy)
        },
        |_, _, _| {},
    )?;
    let terminal = out[0];
    let acc = &out[1..];
    let log_prob = standard_normal_log_density(terminal) + mean_of(acc);
    let stderr = stderr_of(acc);
    Ok(LogDensity { terminal, log_prob, trace_mode: *mode, stderr })
}

/// Differentiable log-density of data points under `model`.
pub fn log_prob<'t, R: Rng + ?Sized>(
    model: &GenerativeModel,
    params: &[Var<'t>],
    x: Var<'t>,
    cond: Option<Var<'t>>,
    spec: &SolverSpec,
    mode: &TraceMode,
    rng: &mut R,
) -> Result<LogDensity<'t>> {
    let sched = model.schedule();
    let field = model.field(params, cond);
    log_prob_field(&field, x, sched.data_time(), sched.prior_time(), spec, mode, rng)
}

/// Log-densities (and Hutchinson standard errors) of many points, evaluated
/// in parallel row chunks. Each chunk gets its own rng seeded from `rng`.
pub fn log_prob_values<R: Rng + ?Sized>(
    model: &GenerativeModel,
    x: &Tensor,
    cond: Option<&Tensor>,
    spec: &SolverSpec,
    mode: &TraceMode,
    rng: &mut R,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    mode.validate()?;
    let n = x.rows();
    // The tape holds one set of intermediates per (row, probe); keep that
    // product near what an exact-trace chunk of a 2-dim problem needs.
    let per_row = match mode {
        TraceMode::Exact => x.cols(),
        TraceMode::Hutchinson { probes, .. } => *probes,
    };
    let chunk = (2 * CHUNK_ROWS / per_row.max(1)).clamp(1, CHUNK_ROWS);
    let chunks = n.div_ceil(chunk);
    let seeds: Vec<u64> = (0..chunks).map(|_| rng.next_u64()).collect();
    let parts = par::map_range(chunks, |ci| {
        let (lo, hi) = (ci * chunk, ((ci + 1) * chunk).min(n));
        let tape = Tape::new();
        let params = model.bind(&tape, false);
        let xs = tape.constant(x.slice_rows(lo, hi));
        let cs = cond.map(|c| tape.constant(c.slice_rows(lo, hi)));
        let mut crng = ChaCha8Rng::seed_from_u64(seeds[ci]);
        let res = log_prob(model, &params, xs, cs, spec, mode, &mut crng)?;
        Ok::<_, Error>((res.log_prob.to_tensor().into_data(), res.stderr.map(Tensor::into_data)))
    });
    let mut lp = Vec::with_capacity(n);
    let mut se: Option<Vec<f64>> = None;
    for part in parts {
        let (l, s) = part?;
        lp.extend(l);
        if let Some(s) = s {
            se.get_or_insert_with(Vec::new).extend(s);
        }
    }
    Ok((lp, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{ConstantField, LinearField, Scheme};
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_field_has_trace_dim() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 2.0]]).unwrap());
        let eye = LinearField { a: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap() };
        let tr = jacobian_trace(&eye, x, 0.5, &TraceMode::Exact, &mut rng(0)).unwrap();
        assert_eq!(tr.value.value().data(), &[2.0, 2.0]);
        assert!(tr.stderr.is_none());
    }

    #[test]
    fn constant_field_has_zero_trace_and_variance() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[3, 2]));
        let f = ConstantField { c: vec![1.0, -4.0] };
        let tr = jacobian_trace(&f, x, 0.5, &TraceMode::hutchinson(8), &mut rng(0)).unwrap();
        assert!(tr.value.value().data().iter().all(|v| *v == 0.0));
        assert!(tr.stderr.unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hutchinson_matches_random_matrix_trace() {
        let mut r = rng(11);
        let a = Tensor::randn(&[4, 4], &mut r);
        let exact: f64 = (0..4).map(|i| a.get(i, i)).sum();
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[1, 4], &mut r));
        let f = LinearField { a };
        let tr = jacobian_trace(&f, x, 0.0, &TraceMode::hutchinson(10_000), &mut r).unwrap();
        let se = tr.stderr.unwrap().item();
        assert!((tr.value.item() - exact).abs() < 3.0 * se, "{} vs {exact} (se {se})", tr.value.item());
        let tr = jacobian_trace(&f, x, 0.0, &TraceMode::Exact, &mut r).unwrap();
        assert_relative_eq!(tr.value.item(), exact, max_relative = 1e-12);
    }

    #[test]
    fn zero_probes_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2]));
        let f = ConstantField { c: vec![0.0, 0.0] };
        assert!(jacobian_trace(&f, x, 0.5, &TraceMode::hutchinson(0), &mut rng(0)).is_err());
    }

    #[test]
    fn zero_field_gives_prior_density() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let spec = SolverSpec::new(Scheme::Euler, 4).unwrap();
        let f = ConstantField { c: vec![0.0, 0.0] };
        let lp = log_prob_field(&f, x, 0.0, 1.0, &spec, &TraceMode::Exact, &mut rng(0)).unwrap();
        assert_relative_eq!(lp.log_prob.item(), -(2.0 * std::f64::consts::PI).ln(), max_relative = 1e-14);
        assert_relative_eq!(lp.log_prob.item(), -1.837877, epsilon = 1e-6);
    }

    #[test]
    fn constant_field_translates() {
        let tape = Tape::new();
        let x0 = Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let c = [0.3, 0.7];
        let spec = SolverSpec::new(Scheme::Midpoint, 10).unwrap();
        let f = ConstantField { c: c.to_vec() };
        // Integrate backwards in time (data at 1, prior at 0), as for I-CFM.
        let lp = log_prob_field(&f, tape.constant(x0.clone()), 1.0, 0.0, &spec, &TraceMode::Exact, &mut rng(0)).unwrap();
        let z: Vec<f64> = x0.data().iter().zip(c).map(|(x, c)| x - c).collect();
        let expect = -0.5 * (z[0] * z[0] + z[1] * z[1]) - (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(lp.log_prob.item(), expect, max_relative = 1e-12);
    }

    #[test]
    fn linear_flow_matches_gaussian_change_of_variables() {
        // dx/dt = a x from t=0 to 1 maps x to e^a x; density of x is then
        // N(e^a x; 0, I)·e^{d a}.
        let a = 0.4;
        let tape = Tape::new();
        let x0 = Tensor::from_rows(&[vec![0.2, -0.6], vec![1.5, 0.1]]).unwrap();
        let f = LinearField { a: Tensor::from_rows(&[vec![a, 0.0], vec![0.0, a]]).unwrap() };
        let spec = SolverSpec::new(Scheme::Rk4_38, 32).unwrap();
        let lp = log_prob_field(&f, tape.constant(x0.clone()), 0.0, 1.0, &spec, &TraceMode::Exact, &mut rng(0)).unwrap();
        for r in 0..2 {
            let z: Vec<f64> = x0.row(r).iter().map(|v| v * a.exp()).collect();
            let expect = -0.5 * z.iter().map(|v| v * v).sum::<f64>() - (2.0 * std::f64::consts::PI).ln() + 2.0 * a;
            assert_relative_eq!(lp.log_prob.value().data()[r], expect, max_relative = 1e-8);
        }
        let h = log_prob_field(&f, tape.constant(x0), 0.0, 1.0, &spec, &TraceMode::hutchinson(4), &mut rng(1)).unwrap();
        assert!(h.stderr.is_some());
    }

    #[test]
    fn rademacher_probes_are_signs() {
        let p = draw_probes(&TraceMode::Hutchinson { probes: 3, dist: ProbeDist::Rademacher }, 5, 2, &mut rng(2));
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|t| t.data().iter().all(|v| v.abs() == 1.0)));
    }
}
