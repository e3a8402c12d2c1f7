//! Conditional generative model: an MLP over `[time features ‖ condition ‖ x_t]`
//! whose output is interpreted as a velocity, noise or score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, FourierFeatures, Mlp, Tape, Tensor, Var};
use crate::sampler::{TensorField, VectorField};
use crate::schedules::{Parameterization, PathSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub schedule: PathSchedule,
    pub parameterization: Parameterization,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embed_width: usize,
    pub time_embed_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            schedule: PathSchedule::icfm(),
            parameterization: Parameterization::Velocity,
            hidden: vec![256, 256, 256],
            activation: Activation::Tanh,
            time_embed_width: 32,
            time_embed_scale: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeModel {
    config: ModelConfig,
    x_dim: usize,
    cond_dim: usize,
    embed: FourierFeatures,
    net: Mlp,
}

impl GenerativeModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, x_dim: usize, cond_dim: usize, rng: &mut R) -> Result<Self> {
        config.schedule.validate()?;
        if !config.schedule.supports(config.parameterization) {
            return Err(Error::Unsupported(format!(
                "{:?} output on the {} schedule",
                config.parameterization,
                config.schedule.name()
            )));
        }
        if x_dim == 0 {
            return Err(Error::InvalidArgument("model dimension must be positive".into()));
        }
        if config.time_embed_width % 2 != 0 {
            return Err(Error::InvalidArgument("time embedding width must be even".into()));
        }
        let embed = FourierFeatures::new(config.time_embed_width, config.time_embed_scale, rng);
        let mut sizes = vec![embed.width() + cond_dim + x_dim];
        sizes.extend(&config.hidden);
        sizes.push(x_dim);
        let net = Mlp::new(&sizes, config.activation, rng);
        Ok(Self { config, x_dim, cond_dim, embed, net })
    }

    pub fn from_parts(config: ModelConfig, x_dim: usize, cond_dim: usize, embed: FourierFeatures, net: Mlp) -> Result<Self> {
        if net.input_dim() != embed.width() + cond_dim + x_dim || net.output_dim() != x_dim {
            return Err(Error::shape("GenerativeModel::from_parts", format!("network sizes {:?}", net.sizes())));
        }
        Ok(Self { config, x_dim, cond_dim, embed, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> PathSchedule {
        self.config.schedule
    }

    pub fn parameterization(&self) -> Parameterization {
        self.config.parameterization
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn embed(&self) -> &FourierFeatures {
        &self.embed
    }

    pub fn params(&self) -> &[Tensor] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.net.params_mut()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.net.bind(tape, trainable)
    }

    fn check_cond(&self, rows: usize, cond: Option<(usize, usize)>) -> Result<()> {
        match cond {
            None if self.cond_dim == 0 => Ok(()),
            Some((r, c)) if c == self.cond_dim && r == rows => Ok(()),
            other => Err(Error::shape(
                "GenerativeModel",
                format!("condition {other:?} for {rows} rows, expected width {}", self.cond_dim),
            )),
        }
    }

    fn input<'t>(&self, x: Var<'t>, t: &[f64], cond: Option<Var<'t>>) -> Result<Var<'t>> {
        let rows = x.value().rows();
        if x.value().cols() != self.x_dim || (t.len() != rows && t.len() != 1) {
            return Err(Error::shape("GenerativeModel", format!("x {:?} with {} times", x.shape(), t.len())));
        }
        self.check_cond(rows, cond.map(|c| c.value().dims2()))?;
        let tape = x.tape();
        let emb = if t.len() == rows { self.embed.embed(t) } else { self.embed.embed(&vec![t[0]; rows]) };
        let mut parts = vec![tape.constant(emb)];
        parts.extend(cond);
        parts.push(x);
        Ok(tape.concat_cols(&parts))
    }

    /// Raw network output at per-row (or shared, when `t.len() == 1`) times.
    pub fn raw<'t>(&self, params: &[Var<'t>], x: Var<'t>, t: &[f64], cond: Option<Var<'t>>) -> Result<Var<'t>> {
        let input = self.input(x, t, cond)?;
        Ok(self.net.forward(params, input))
    }

    /// Network output expressed in parameterization `to`.
    pub fn output_as<'t>(
        &self,
        params: &[Var<'t>],
        x: Var<'t>,
        t: &[f64],
        cond: Option<Var<'t>>,
        to: Parameterization,
    ) -> Result<Var<'t>> {
        let raw = self.raw(params, x, t, cond)?;
        self.convert_var(x, t, raw, to)
    }

    fn convert_var<'t>(&self, x: Var<'t>, t: &[f64], raw: Var<'t>, to: Parameterization) -> Result<Var<'t>> {
        let from = self.parameterization();
        if from == to {
            return Ok(raw);
        }
        let sched = self.schedule();
        let tape = x.tape();
        if t.len() == 1 {
            let (a, b) = sched.conversion(from, to, t[0])?;
            return Ok(if a == 0.0 { raw.scale(b) } else { x.scale(a) + raw.scale(b) });
        }
        let coeffs = t.iter().map(|&ti| sched.conversion(from, to, ti)).collect::<Result<Vec<_>>>()?;
        let a = tape.constant(Tensor::column(coeffs.iter().map(|c| c.0).collect()));
        let b = tape.constant(Tensor::column(coeffs.iter().map(|c| c.1).collect()));
        Ok(x * a + raw * b)
    }

    pub fn velocity<'t>(&self, params: &[Var<'t>], x: Var<'t>, t: &[f64], cond: Option<Var<'t>>) -> Result<Var<'t>> {
        self.output_as(params, x, t, cond, Parameterization::Velocity)
    }

    /// Velocity at shared time `t` and its Jacobian-vector products along
    /// `tangents` (each shaped like `x`).
    pub fn velocity_jvp<'t>(
        &self,
        params: &[Var<'t>],
        x: Var<'t>,
        t: f64,
        cond: Option<Var<'t>>,
        tangents: &[Var<'t>],
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let tape = x.tape();
        let input = self.input(x, &[t], cond)?;
        let rows = x.value().rows();
        let pad = tape.constant(Tensor::zeros(&[rows, self.embed.width() + self.cond_dim]));
        let padded: Vec<Var<'t>> = tangents.iter().map(|&d| tape.concat_cols(&[pad, d])).collect();
        let (raw, jraw) = self.net.forward_jvp(params, input, &padded);
        let from = self.parameterization();
        if from == Parameterization::Velocity {
            return Ok((raw, jraw));
        }
        let (a, b) = self.schedule().conversion(from, Parameterization::Velocity, t)?;
        let v = x.scale(a) + raw.scale(b);
        let jv = tangents.iter().zip(jraw).map(|(&d, j)| d.scale(a) + j.scale(b)).collect();
        Ok((v, jv))
    }

    /// Tape-free velocity at shared time `t`.
    pub fn velocity_values(&self, x: &Tensor, t: f64, cond: Option<&Tensor>) -> Result<Tensor> {
        let rows = x.rows();
        if x.cols() != self.x_dim {
            return Err(Error::shape("GenerativeModel", format!("x has {} columns, expected {}", x.cols(), self.x_dim)));
        }
        self.check_cond(rows, cond.map(Tensor::dims2))?;
        let emb = self.embed.embed(&vec![t; rows]);
        let mut parts = vec![&emb];
        parts.extend(cond);
        parts.push(x);
        let raw = self.net.eval(&Tensor::hstack(&parts)?);
        let from = self.parameterization();
        if from == Parameterization::Velocity {
            return Ok(raw);
        }
        let (a, b) = self.schedule().conversion(from, Parameterization::Velocity, t)?;
        x.zip_map(&raw, |x, r| a * x + b * r)
    }

    /// Binds this model on a tape as a [`VectorField`].
    pub fn field<'m, 't>(&'m self, params: &'m [Var<'t>], cond: Option<Var<'t>>) -> ModelField<'m, 't> {
        ModelField { model: self, params, cond }
    }

    /// Tape-free [`TensorField`] view with an optional fixed condition.
    pub fn value_field<'m>(&'m self, cond: Option<&'m Tensor>) -> ModelValueField<'m> {
        ModelValueField { model: self, cond }
    }
}

pub struct ModelField<'m, 't> {
    model: &'m GenerativeModel,
    params: &'m [Var<'t>],
    cond: Option<Var<'t>>,
}

impl<'t> VectorField<'t> for ModelField<'_, 't> {
    fn velocity(&self, x: Var<'t>, t: f64) -> Result<Var<'t>> {
        self.model.velocity(self.params, x, &[t], self.cond)
    }

    fn velocity_jvp(&self, x: Var<'t>, t: f64, tangents: &[Var<'t>]) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        self.model.velocity_jvp(self.params, x, t, self.cond, tangents)
    }
}

pub struct ModelValueField<'m> {
    model: &'m GenerativeModel,
    cond: Option<&'m Tensor>,
}

impl TensorField for ModelValueField<'_> {
    fn velocity(&self, x: &Tensor, t: f64, rows: std::ops::Range<usize>) -> Result<Tensor> {
        match self.cond {
            Some(c) if rows.len() != c.rows() => {
                self.model.velocity_values(x, t, Some(&c.slice_rows(rows.start, rows.end)))
            }
            c => self.model.velocity_values(x, t, c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(schedule: PathSchedule, param: Parameterization) -> GenerativeModel {
        let cfg = ModelConfig {
            schedule,
            parameterization: param,
            hidden: vec![8, 8],
            time_embed_width: 4,
            ..ModelConfig::default()
        };
        GenerativeModel::new(cfg, 2, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn icfm_rejects_noise_output() {
        let cfg = ModelConfig { parameterization: Parameterization::Noise, ..ModelConfig::default() };
        assert!(GenerativeModel::new(cfg, 2, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn tape_and_value_velocity_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for param in [Parameterization::Velocity, Parameterization::Noise, Parameterization::Score] {
            let m = small(PathSchedule::Gvp, param);
            let x = Tensor::randn(&[3, 2], &mut rng);
            let c = Tensor::randn(&[3, 1], &mut rng);
            let tape = Tape::new();
            let p = m.bind(&tape, false);
            let v = m.velocity(&p, tape.constant(x.clone()), &[0.4], Some(tape.constant(c.clone()))).unwrap();
            let w = m.velocity_values(&x, 0.4, Some(&c)).unwrap();
            assert!(v.value().max_abs_diff(&w) < 1e-12);
        }
    }

    #[test]
    fn velocity_jvp_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = small(PathSchedule::vp_sde(), Parameterization::Noise);
        let x = Tensor::randn(&[3, 2], &mut rng);
        let c = Tensor::randn(&[3, 1], &mut rng);
        let dir = Tensor::randn(&[3, 2], &mut rng);
        let tape = Tape::new();
        let p = m.bind(&tape, false);
        let (_, jv) = m
            .velocity_jvp(&p, tape.constant(x.clone()), 0.6, Some(tape.constant(c.clone())), &[tape.constant(dir.clone())])
            .unwrap();
        let h = 1e-6;
        let plus = m.velocity_values(&x.zip_map(&dir, |a, d| a + h * d).unwrap(), 0.6, Some(&c)).unwrap();
        let minus = m.velocity_values(&x.zip_map(&dir, |a, d| a - h * d).unwrap(), 0.6, Some(&c)).unwrap();
        let fd = plus.zip_map(&minus, |a, b| (a - b) / (2.0 * h)).unwrap();
        assert!(jv[0].value().max_abs_diff(&fd) < 1e-6);
    }

    #[test]
    fn condition_width_is_checked() {
        let m = small(PathSchedule::Gvp, Parameterization::Velocity);
        let x = Tensor::zeros(&[2, 2]);
        assert!(m.velocity_values(&x, 0.5, None).is_err());
        assert!(m.velocity_values(&x, 0.5, Some(&Tensor::zeros(&[2, 3]))).is_err());
    }
}
