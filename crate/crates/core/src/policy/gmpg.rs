use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gmpo::{gmpo_weight, WeightMode};
use super::{clip_grads, diverged, evaluate_policy, GenerativePolicy, MetricsRow, TrainConfig};
use crate::critic::ActionValue;
use crate::data::OfflineDataset;
use crate::error::{Error, Result};
use crate::likelihood::{log_prob, TraceMode};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::sampler::{generate_from, Scheme, SolverSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum GmpgVariant {
    /// Actions drawn from the policy itself, differentiated through the sampler.
    Dynamic,
    /// Actions drawn from the frozen behavior policy, importance weighted.
    Static { weight: WeightMode },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmpgConfig {
    pub beta: f64,
    /// Solver used for training-time generation and likelihoods.
    pub solver: SolverSpec,
    pub trace: TraceMode,
    pub variant: GmpgVariant,
    pub train: TrainConfig,
}

impl Default for GmpgConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            solver: SolverSpec { scheme: Scheme::Euler, steps: 1000 },
            trace: TraceMode::Exact,
            variant: GmpgVariant::Dynamic,
            train: TrainConfig { batch_size: 512, ..Default::default() },
        }
    }
}

impl GmpgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be finite and non-negative, got {}", self.beta)));
        }
        if self.solver.steps == 0 {
            return Err(Error::InvalidArgument("GMPG needs at least one solver step".into()));
        }
        self.trace.validate()?;
        if let GmpgVariant::Static { weight } = self.variant {
            weight.validate()?;
        }
        self.train.validate()
    }
}

/// A differentiable objective together with diagnostics.
pub struct GmpgTerms<'t> {
    /// Scalar to differentiate. For the static variant this is a surrogate
    /// whose gradient is the importance-weighted score-function gradient.
    pub loss: Var<'t>,
    /// Batch estimate of `E[−βQ + log π − log μ]`.
    pub objective: f64,
    pub mean_weight: f64,
    pub mean_q: f64,
}

fn check_pair(policy: &GenerativePolicy, behavior: &GenerativePolicy, states: &Tensor) -> Result<()> {
    policy.require_velocity("GMPG")?;
    behavior.require_velocity("GMPG")?;
    if policy.state_dim() != behavior.state_dim() || policy.action_dim() != behavior.action_dim() {
        return Err(Error::shape("GMPG", "policy and behavior dimensions differ".to_string()));
    }
    policy.check_states(states)
}

fn tape_of<'t>(params: &[Var<'t>]) -> Result<&'t Tape> {
    params.first().map(|p| p.tape()).ok_or_else(|| Error::InvalidArgument("policy has no parameters".into()))
}

/// Single-sample reverse-KL loss `mean(−βQ(s,a) + log π(a|s) − log μ(a|s))`
/// with `a` generated by `policy` from `params` on the tape. `μ` enters as a
/// constant model and the critic is frozen; both still pass gradients
/// through `a`.
pub fn gmpg_loss<'t, C: ActionValue + ?Sized, R: Rng + ?Sized>(
    policy: &GenerativePolicy,
    params: &[Var<'t>],
    behavior: &GenerativePolicy,
    critic: &C,
    states: &Tensor,
    cfg: &GmpgConfig,
    rng: &mut R,
) -> Result<GmpgTerms<'t>> {
    check_pair(policy, behavior, states)?;
    let tape = tape_of(params)?;
    let cond = tape.constant(states.clone());
    let z = tape.constant(Tensor::randn(&[states.rows(), policy.action_dim()], rng));
    let a = generate_from(&policy.model, params, z, Some(cond), &cfg.solver)?;
    let log_pi = log_prob(&policy.model, params, a, Some(cond), &cfg.solver, &cfg.trace, rng)?.log_prob;
    let mu_params = behavior.model.bind(tape, false);
    let log_mu = log_prob(&behavior.model, &mu_params, a, Some(cond), &cfg.solver, &cfg.trace, rng)?.log_prob;
    let q = critic.q_var(states, a)?;
    let loss = (q.scale(-cfg.beta) + log_pi - log_mu).mean();
    Ok(GmpgTerms { objective: loss.item(), loss, mean_weight: 1.0, mean_q: q.value().mean() })
}

/// Static variant: actions from the frozen `behavior`, weights from
/// [`gmpo_weight`], and a surrogate whose gradient is
/// `mean(w · (−βQ + log π − log μ) · ∇ log π)`.
#[allow(clippy::too_many_arguments)]
pub fn gmpg_static_grad<'t, C: ActionValue + ?Sized, R: Rng + ?Sized>(
    policy: &GenerativePolicy,
    params: &[Var<'t>],
    behavior: &GenerativePolicy,
    critic: &C,
    states: &Tensor,
    weight: WeightMode,
    cfg: &GmpgConfig,
    rng: &mut R,
) -> Result<GmpgTerms<'t>> {
    check_pair(policy, behavior, states)?;
    let tape = tape_of(params)?;
    let k = match weight {
        WeightMode::Softmax { k } => k,
        WeightMode::Exponential { .. } => 1,
    };
    let idx: Vec<usize> = (0..states.rows()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let s = states.select_rows(&idx);
    let a = behavior.act_with(&s, &cfg.solver, rng)?;
    let w: Vec<f64> = gmpo_weight(critic, &s, &a, cfg.beta, weight)?.into_iter().map(|w| w * k as f64).collect();
    let cond = tape.constant(s.clone());
    let a_var = tape.constant(a.clone());
    let log_pi = log_prob(&policy.model, params, a_var, Some(cond), &cfg.solver, &cfg.trace, rng)?.log_prob;
    let mu_params = behavior.model.bind(tape, false);
    let log_mu = log_prob(&behavior.model, &mu_params, a_var, Some(cond), &cfg.solver, &cfg.trace, rng)?.log_prob;
    let q = critic.q_values(&s, &a)?;
    let lp = log_pi.value();
    let bracket: Vec<f64> = (0..s.rows())
        .map(|i| -cfg.beta * q.data()[i] + lp.data()[i] - log_mu.value().data()[i])
        .collect();
    let coef: Vec<f64> = w.iter().zip(&bracket).map(|(w, b)| w * b).collect();
    let n = s.rows() as f64;
    let objective = coef.iter().sum::<f64>() / n;
    let loss = (log_pi * tape.constant(Tensor::column(coef))).mean();
    Ok(GmpgTerms { loss, objective, mean_weight: w.iter().sum::<f64>() / n, mean_q: q.mean() })
}

/// Trains a copy of `behavior` by gradient descent on the reverse-KL
/// objective. Returns the trained policy and its metrics.
pub fn train_gmpg<C: ActionValue + ?Sized, R: Rng + ?Sized>(
    dataset: &OfflineDataset,
    critic: &C,
    behavior: &GenerativePolicy,
    cfg: &GmpgConfig,
    rng: &mut R,
) -> Result<(GenerativePolicy, Vec<MetricsRow>)> {
    train_gmpg_with(dataset, critic, behavior, cfg, rng, |_, _| Ok(()))
}

/// [`train_gmpg`] with a callback run after every update, given the step
/// number and the current policy.
pub fn train_gmpg_with<C, R, F>(
    dataset: &OfflineDataset,
    critic: &C,
    behavior: &GenerativePolicy,
    cfg: &GmpgConfig,
    rng: &mut R,
    mut observe: F,
) -> Result<(GenerativePolicy, Vec<MetricsRow>)>
where
    C: ActionValue + ?Sized,
    R: Rng + ?Sized,
    F: FnMut(usize, &GenerativePolicy) -> Result<()>,
{
    cfg.validate()?;
    behavior.require_velocity("GMPG")?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if dataset.state_dim() != behavior.state_dim() || dataset.action_dim() != behavior.action_dim() {
        return Err(Error::shape("train_gmpg", "dataset and behavior dimensions differ".to_string()));
    }
    let mut policy = behavior.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.train.lr), policy.model.params());
    let mut log = Vec::with_capacity(cfg.train.steps);
    for step in 1..=cfg.train.steps {
        let idx = dataset.sample_indices(cfg.train.batch_size, rng)?;
        let states = dataset.states.select_rows(&idx);
        let (terms, mut grads, mean_v) = {
            let tape = Tape::new();
            let params = policy.model.bind(&tape, true);
            let t = match cfg.variant {
                GmpgVariant::Dynamic => gmpg_loss(&policy, &params, behavior, critic, &states, cfg, rng),
                GmpgVariant::Static { weight } => {
                    gmpg_static_grad(&policy, &params, behavior, critic, &states, weight, cfg, rng)
                }
            }
            .map_err(|e| diverged(step, "GMPG objective", e))?;
            let g = tape.backward(t.loss).map_err(|e| diverged(step, "GMPG gradient", e))?;
            let mean_v = critic.v_values(&states)?.mean();
            ((t.objective, t.mean_weight, t.mean_q), g.wrt_all(&params), mean_v)
        };
        let (objective, mean_weight, mean_q) = terms;
        if !objective.is_finite() {
            return Err(Error::TrainingDiverged { step, detail: format!("objective is {objective}") });
        }
        clip_grads(&mut grads, cfg.train.grad_clip);
        opt.step(policy.model.params_mut(), &grads).map_err(|e| diverged(step, "policy update", e))?;
        let eval_value = if cfg.train.evaluates_at(step) {
            Some(evaluate_policy(&policy, critic, dataset, cfg.train.eval_states, cfg.train.eval_seed)?)
        } else {
            None
        };
        log.push(MetricsRow { step, loss: objective, mean_weight, mean_advantage: Some(mean_q - mean_v), eval_value });
        observe(step, &policy)?;
    }
    Ok((policy, log))
}
