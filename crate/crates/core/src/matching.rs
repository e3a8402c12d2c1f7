//! Denoising score matching and conditional flow matching losses, with
//! optional per-sample weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GenerativeModel;
use crate::numerics::{Tensor, Var};
use crate::schedules::{Parameterization, PathSchedule, T_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Dsm,
    Cfm,
}

/// Time weighting `λ(t)` of the score matching loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lambda {
    /// `σ_t²`
    Vanilla,
    /// `g²(t)`
    Mlsm,
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingConfig {
    pub objective: Objective,
    /// Only used by DSM.
    pub lambda: Lambda,
    pub time_samples: usize,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self { objective: Objective::Cfm, lambda: Lambda::Vanilla, time_samples: 1 }
    }
}

impl MatchingConfig {
    pub fn dsm(lambda: Lambda) -> Self {
        Self { objective: Objective::Dsm, lambda, time_samples: 1 }
    }

    pub fn cfm() -> Self {
        Self { objective: Objective::Cfm, ..Self::default() }
    }

    pub fn validate(&self, schedule: PathSchedule, param: Parameterization) -> Result<()> {
        if self.time_samples == 0 {
            return Err(Error::InvalidArgument("time_samples must be at least 1".into()));
        }
        match self.objective {
            Objective::Dsm if !schedule.is_diffusion() => {
                Err(Error::InvalidArgument(format!("DSM needs a diffusion schedule, got {}", schedule.name())))
            }
            Objective::Dsm if param == Parameterization::Velocity => {
                Err(Error::InvalidArgument("DSM needs a score or noise parameterized model".into()))
            }
            Objective::Cfm if param != Parameterization::Velocity => {
                Err(Error::InvalidArgument(format!("CFM needs a velocity parameterized model, got {param:?}")))
            }
            _ => Ok(()),
        }
    }
}

/// Per-row random inputs of one loss evaluation.
///
/// `eps` is the Gaussian noise for diffusion paths and the source sample for
/// I-CFM; `path_noise` is only non-zero for I-CFM with `σ > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub t: Vec<f64>,
    pub eps: Tensor,
    pub path_noise: Option<Tensor>,
}

impl Draws {
    /// Draws times first, then `eps`, then I-CFM path noise when needed.
    pub fn sample<R: Rng + ?Sized>(schedule: PathSchedule, rows: usize, dim: usize, rng: &mut R) -> Self {
        let t = (0..rows).map(|_| rng.random_range(T_EPS..=1.0 - T_EPS)).collect();
        let eps = Tensor::randn(&[rows, dim], rng);
        let path_noise = match schedule {
            PathSchedule::Icfm { sigma } if sigma > 0.0 => Some(Tensor::randn(&[rows, dim], rng)),
            _ => None,
        };
        Self { t, eps, path_noise }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            t: idx.iter().map(|&i| self.t[i]).collect(),
            eps: self.eps.select_rows(idx),
            path_noise: self.path_noise.as_ref().map(|p| p.select_rows(idx)),
        }
    }
}

fn check_weights(weights: Option<&[f64]>, rows: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != rows {
            return Err(Error::shape("matching loss", format!("{} weights for {rows} samples", w.len())));
        }
        if let Some(bad) = w.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample weights must be finite and non-negative, got {bad}")));
        }
    }
    Ok(())
}

fn repeat_rows(x: &Tensor, k: usize) -> Tensor {
    if k == 1 {
        return x.clone();
    }
    let idx: Vec<usize> = (0..k).flat_map(|_| 0..x.rows()).collect();
    x.select_rows(&idx)
}

/// Per-sample squared errors, mean over dimensions: `[n, 1]`.
fn row_sq_error<'t>(pred: Var<'t>, target: Var<'t>) -> Var<'t> {
    let d = pred.value().cols() as f64;
    (pred - target).square().sum_cols().scale(1.0 / d)
}

fn reduce<'t>(per_sample: Var<'t>, lambda: Option<Vec<f64>>, weights: Option<&[f64]>) -> Var<'t> {
    let tape = per_sample.tape();
    let mut l = per_sample;
    if let Some(lam) = lambda {
        l = l * tape.constant(Tensor::column(lam));
    }
    if let Some(w) = weights {
        l = l * tape.constant(Tensor::column(w.to_vec()));
    }
    l.mean().scale(0.5)
}

/// Loss for explicit draws. `data` holds one row per draw, `cond` likewise.
pub fn loss_with_draws<'t>(
    model: &GenerativeModel,
    params: &[Var<'t>],
    cfg: &MatchingConfig,
    data: &Tensor,
    cond: Option<&Tensor>,
    weights: Option<&[f64]>,
    draws: &Draws,
) -> Result<Var<'t>> {
    let schedule = model.schedule();
    cfg.validate(schedule, model.parameterization())?;
    let rows = data.rows();
    if draws.t.len() != rows || draws.eps.shape() != data.shape() {
        return Err(Error::shape("matching loss", format!("draws for {} rows, data {:?}", draws.t.len(), data.shape())));
    }
    check_weights(weights, rows)?;
    let tape = params
        .first()
        .map(|p| p.tape())
        .ok_or_else(|| Error::InvalidArgument("model has no parameters".into()))?;
    let cond_var = cond.map(|c| tape.constant(c.clone()));
    match cfg.objective {
        Objective::Dsm => {
            let point = schedule.sample_path_point(data, &draws.eps, &draws.t, &mut NoRng)?;
            let target = schedule.target_score(&point.x_t, data, &draws.t)?;
            let pred = model.output_as(params, tape.constant(point.x_t), &draws.t, cond_var, Parameterization::Score)?;
            let lam = match cfg.lambda {
                Lambda::Unit => None,
                Lambda::Vanilla => Some(
                    draws.t.iter().map(|&t| schedule.alpha_sigma(t).map(|(_, s)| s * s)).collect::<Result<_>>()?,
                ),
                Lambda::Mlsm => {
                    Some(draws.t.iter().map(|&t| schedule.drift_diffusion(t).map(|(_, g2)| g2)).collect::<Result<_>>()?)
                }
            };
            Ok(reduce(row_sq_error(pred, tape.constant(target)), lam, weights))
        }
        Objective::Cfm => {
            let (x_t, target) = match schedule {
                PathSchedule::Icfm { sigma } => {
                    let straight = PathSchedule::Icfm { sigma: 0.0 };
                    let mut x_t = straight.sample_path_point(&draws.eps, data, &draws.t, &mut NoRng)?.x_t;
                    if let (Some(n), true) = (&draws.path_noise, sigma > 0.0) {
                        x_t = x_t.zip_map(n, |x, z| x + sigma * z)?;
                    }
                    (x_t, schedule.target_velocity(&draws.eps, data, &draws.t)?)
                }
                _ => {
                    let x_t = schedule.sample_path_point(data, &draws.eps, &draws.t, &mut NoRng)?.x_t;
                    (x_t, schedule.target_velocity(data, &draws.eps, &draws.t)?)
                }
            };
            let pred = model.velocity(params, tape.constant(x_t), &draws.t, cond_var)?;
            Ok(reduce(row_sq_error(pred, tape.constant(target)), None, weights))
        }
    }
}

/// Monte-Carlo matching loss on a batch of data rows, drawing `(t, ε)` from
/// `rng`. With `time_samples = k` the batch is tiled `k` times.
pub fn matching_loss<'t, R: Rng + ?Sized>(
    model: &GenerativeModel,
    params: &[Var<'t>],
    cfg: &MatchingConfig,
    data: &Tensor,
    cond: Option<&Tensor>,
    weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<Var<'t>> {
    check_weights(weights, data.rows())?;
    let k = cfg.time_samples.max(1);
    let data = repeat_rows(data, k);
    let cond = cond.map(|c| repeat_rows(c, k));
    let weights: Option<Vec<f64>> = weights.map(|w| w.iter().copied().cycle().take(w.len() * k).collect());
    let draws = Draws::sample(model.schedule(), data.rows(), data.cols(), rng);
    loss_with_draws(model, params, cfg, &data, cond.as_ref(), weights.as_deref(), &draws)
}

/// Weighted DSM loss.
pub fn dsm_loss<'t, R: Rng + ?Sized>(
    model: &GenerativeModel,
    params: &[Var<'t>],
    lambda: Lambda,
    data: &Tensor,
    cond: Option<&Tensor>,
    weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<Var<'t>> {
    matching_loss(model, params, &MatchingConfig::dsm(lambda), data, cond, weights, rng)
}

/// Weighted CFM loss.
pub fn cfm_loss<'t, R: Rng + ?Sized>(
    model: &GenerativeModel,
    params: &[Var<'t>],
    data: &Tensor,
    cond: Option<&Tensor>,
    weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<Var<'t>> {
    matching_loss(model, params, &MatchingConfig::cfm(), data, cond, weights, rng)
}

// Path helpers only touch the rng for I-CFM path noise, which
// `loss_with_draws` adds itself from the pre-drawn values.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("path noise is pre-drawn")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("path noise is pre-drawn")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("path noise is pre-drawn")
    }
}
