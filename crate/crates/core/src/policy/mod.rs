//! Generative policies over actions conditioned on states, and the two
//! extraction schemes: weighted matching regression (GMPO) and reverse-KL
//! gradients through the sampler (GMPG).

pub mod discrete;
mod gmpg;
mod gmpo;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::ActionValue;
use crate::data::{Batch, OfflineDataset};
use crate::error::{Error, Result};
use crate::matching::{matching_loss, MatchingConfig};
use crate::model::GenerativeModel;
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::sampler::{generate, SolverSpec};
use crate::schedules::Parameterization;

pub use gmpg::{gmpg_loss, gmpg_static_grad, train_gmpg, train_gmpg_with, GmpgConfig, GmpgTerms, GmpgVariant};
pub use gmpo::{exponential_weights, gmpo_weight, softmax_weights, train_gmpo, GmpoConfig, WeightMode};

/// A conditional generative model of `a | s` plus the solver used to act.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativePolicy {
    pub model: GenerativeModel,
    pub solver: SolverSpec,
}

impl GenerativePolicy {
    pub fn new(model: GenerativeModel, solver: SolverSpec) -> Result<Self> {
        if model.cond_dim() == 0 {
            return Err(Error::InvalidArgument("a policy model must be conditioned on the state".into()));
        }
        Ok(Self { model, solver })
    }

    pub fn state_dim(&self) -> usize {
        self.model.cond_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.model.x_dim()
    }

    pub(crate) fn require_velocity(&self, what: &str) -> Result<()> {
        if self.model.parameterization() == Parameterization::Velocity {
            Ok(())
        } else {
            Err(Error::Unsupported(format!(
                "{what} needs a velocity-parameterized model, got {:?}",
                self.model.parameterization()
            )))
        }
    }

    fn check_states(&self, states: &Tensor) -> Result<()> {
        if states.ndim() == 2 && states.cols() == self.state_dim() {
            Ok(())
        } else {
            Err(Error::shape("policy", format!("states {:?}, state dim {}", states.shape(), self.state_dim())))
        }
    }

    /// One action per state row with the policy's own solver.
    pub fn act<R: Rng + ?Sized>(&self, states: &Tensor, rng: &mut R) -> Result<Tensor> {
        self.act_with(states, &self.solver, rng)
    }

    pub fn act_with<R: Rng + ?Sized>(&self, states: &Tensor, spec: &SolverSpec, rng: &mut R) -> Result<Tensor> {
        self.check_states(states)?;
        Ok(generate(&self.model, states.rows(), spec, Some(states), rng, false)?.samples)
    }
}

/// Optimizer and bookkeeping shared by every training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Evaluate every this many steps (and at the last step); 0 disables.
    pub eval_every: usize,
    pub eval_states: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 64, lr: 1e-3, grad_clip: None, eval_every: 0, eval_states: 256, eval_seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidArgument("gradient clip must be positive".into()));
        }
        Ok(())
    }

    fn evaluates_at(&self, step: usize) -> bool {
        self.eval_every > 0 && (step % self.eval_every == 0 || step == self.steps)
    }
}

/// One row of the per-step metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub mean_weight: f64,
    pub mean_advantage: Option<f64>,
    pub eval_value: Option<f64>,
}

/// Writes metrics as CSV; missing values are left empty.
pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "mean_weight", "mean_advantage", "eval_value"])?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.step.to_string(),
            format!("{:e}", r.loss),
            format!("{:e}", r.mean_weight),
            opt(r.mean_advantage),
            opt(r.eval_value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean `Q(s, π(s))` over a fixed set of dataset states. Uses its own rng so
/// evaluation never perturbs the training stream.
pub fn evaluate_policy<C: ActionValue + ?Sized>(
    policy: &GenerativePolicy,
    critic: &C,
    dataset: &OfflineDataset,
    states: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = dataset.sample_indices(states.max(1), &mut rng)?;
    let s = dataset.states.select_rows(&idx);
    let a = policy.act(&s, &mut rng)?;
    Ok(critic.q_values(&s, &a)?.mean())
}

pub(crate) fn clip_grads(grads: &mut [Tensor], max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = grads.iter().flat_map(|g| g.data()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
}

pub(crate) fn diverged(step: usize, what: &str, e: Error) -> Error {
    if e.is_numeric() {
        Error::TrainingDiverged { step, detail: format!("{what}: {e}") }
    } else {
        e
    }
}

/// Weighted regression rows for one step: states, actions and optional weights.
pub(crate) struct RegressionBatch {
    pub states: Tensor,
    pub actions: Tensor,
    pub weights: Option<Vec<f64>>,
    pub mean_advantage: Option<f64>,
}

/// Matching-loss training loop shared by behavior pretraining and GMPO.
/// `make_rows` turns a dataset batch into regression rows; it must not touch
/// `rng` when the caller needs a stream identical to plain pretraining.
pub(crate) fn matching_loop<R, F>(
    policy: &mut GenerativePolicy,
    dataset: &OfflineDataset,
    matching: &MatchingConfig,
    train: &TrainConfig,
    eval: Option<&dyn Fn(&GenerativePolicy) -> Result<f64>>,
    rng: &mut R,
    mut make_rows: F,
) -> Result<Vec<MetricsRow>>
where
    R: Rng + ?Sized,
    F: FnMut(&Batch, &mut R) -> Result<RegressionBatch>,
{
    train.validate()?;
    matching.validate(policy.model.schedule(), policy.model.parameterization())?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if dataset.state_dim() != policy.state_dim() || dataset.action_dim() != policy.action_dim() {
        return Err(Error::shape(
            "policy training",
            format!(
                "dataset dims ({}, {}) vs policy ({}, {})",
                dataset.state_dim(),
                dataset.action_dim(),
                policy.state_dim(),
                policy.action_dim()
            ),
        ));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(train.lr), policy.model.params());
    let mut log = Vec::with_capacity(train.steps);
    for step in 1..=train.steps {
        let batch = dataset.sample_batch(train.batch_size, rng)?;
        let rows = make_rows(&batch, rng)?;
        let (loss, mut grads) = {
            let tape = Tape::new();
            let params = policy.model.bind(&tape, true);
            let loss = matching_loss(
                &policy.model,
                &params,
                matching,
                &rows.actions,
                Some(&rows.states),
                rows.weights.as_deref(),
                rng,
            )?;
            let g = tape.backward(loss).map_err(|e| diverged(step, "matching loss", e))?;
            (loss.item(), g.wrt_all(&params))
        };
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, detail: format!("loss is {loss}") });
        }
        clip_grads(&mut grads, train.grad_clip);
        opt.step(policy.model.params_mut(), &grads).map_err(|e| diverged(step, "policy update", e))?;
        let mean_weight = rows.weights.as_ref().map_or(1.0, |w| w.iter().sum::<f64>() / w.len() as f64);
        let eval_value = match eval {
            Some(f) if train.evaluates_at(step) => Some(f(policy)?),
            _ => None,
        };
        log.push(MetricsRow { step, loss, mean_weight, mean_advantage: rows.mean_advantage, eval_value });
    }
    Ok(log)
}

/// Fits the behavior policy to the dataset's `(s, a)` pairs with the plain
/// matching loss. The policy's weights are trained in place.
pub fn pretrain_behavior<R: Rng + ?Sized>(
    dataset: &OfflineDataset,
    policy: &mut GenerativePolicy,
    matching: &MatchingConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<MetricsRow>> {
    matching_loop(policy, dataset, matching, train, None, rng, |b, _| {
        Ok(RegressionBatch { states: b.states.clone(), actions: b.actions.clone(), weights: None, mean_advantage: None })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    pub(crate) fn small_policy(seed: u64, state_dim: usize, action_dim: usize) -> GenerativePolicy {
        let cfg = ModelConfig { hidden: vec![16, 16], time_embed_width: 8, ..Default::default() };
        let model = GenerativeModel::new(cfg, action_dim, state_dim, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        GenerativePolicy::new(model, SolverSpec::new(crate::sampler::Scheme::Euler, 8).unwrap()).unwrap()
    }

    #[test]
    fn act_shapes_and_determinism() {
        let p = small_policy(0, 3, 2);
        let s = Tensor::randn(&[5, 3], &mut ChaCha8Rng::seed_from_u64(1));
        let a1 = p.act(&s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a2 = p.act(&s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a1.shape(), &[5, 2]);
        assert_eq!(a1, a2);
        assert!(p.act(&Tensor::zeros(&[5, 2]), &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn unconditional_model_rejected() {
        let m = GenerativeModel::new(
            ModelConfig { hidden: vec![4], time_embed_width: 4, ..Default::default() },
            1,
            0,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(GenerativePolicy::new(m, SolverSpec::default()).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::column(vec![3.0, 4.0])];
        clip_grads(&mut g, Some(1.0));
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        clip_grads(&mut g, Some(10.0));
        assert!((g[0].data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = [MetricsRow { step: 1, loss: 0.5, mean_weight: 1.0, mean_advantage: None, eval_value: Some(2.0) }];
        let mut buf = Vec::new();
        write_metrics(&mut buf, &rows).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "step,loss,mean_weight,mean_advantage,eval_value\n1,5e-1,1e0,,2e0\n");
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut p = small_policy(0, 1, 1);
        let ds = OfflineDataset::new(
            Tensor::zeros(&[0, 1]),
            Tensor::zeros(&[0, 1]),
            Tensor::zeros(&[0, 1]),
            Tensor::zeros(&[0, 1]),
            Tensor::zeros(&[0, 1]),
            Default::default(),
        )
        .unwrap();
        let r = pretrain_behavior(&ds, &mut p, &MatchingConfig::cfm(), &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
