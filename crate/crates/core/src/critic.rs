//! Implicit Q-Learning: `V` by expectile regression on `Q`, `Q` by one-step
//! Bellman regression on `r + γ(1 - done) V(s')`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, OfflineDataset};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Adam, AdamConfig, Mlp, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub tau: f64,
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            gamma: 0.99,
            hidden: vec![256, 256],
            activation: Activation::Tanh,
            lr: 1e-4,
            steps: 10_000,
            batch_size: 256,
        }
    }
}

/// `mean(|τ - 1(u ≤ 0)| · u²)`. The asymmetric weight is treated as a constant.
pub fn expectile_loss<'t>(u: Var<'t>, tau: f64) -> Var<'t> {
    let w = u.value().map(|u| if u <= 0.0 { 1.0 - tau } else { tau });
    (u.square() * u.tape().constant(w)).mean()
}

pub fn expectile_loss_values(u: &[f64], tau: f64) -> f64 {
    if u.is_empty() {
        return 0.0;
    }
    u.iter().map(|&u| if u <= 0.0 { (1.0 - tau) * u * u } else { tau * u * u }).sum::<f64>() / u.len() as f64
}

/// Frozen action-value model used by policy extraction.
pub trait ActionValue: Sync {
    /// `Q(s, a)` on the tape of `a`, differentiable in `a` only.
    fn q_var<'t>(&self, s: &Tensor, a: Var<'t>) -> Result<Var<'t>>;
    fn q_values(&self, s: &Tensor, a: &Tensor) -> Result<Tensor>;
    fn v_values(&self, s: &Tensor) -> Result<Tensor>;

    /// `Q(s, a) - V(s)` per row.
    fn advantage(&self, s: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        let q = self.q_values(s, a)?;
        let v = self.v_values(s)?;
        Ok(q.data().iter().zip(v.data()).map(|(q, v)| q - v).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    q: Mlp,
    v: Mlp,
    tau: f64,
    gamma: f64,
    state_dim: usize,
    action_dim: usize,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(cfg: &CriticConfig, state_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self> {
        let mut qs = vec![state_dim + action_dim];
        qs.extend(&cfg.hidden);
        qs.push(1);
        let mut vs = vec![state_dim];
        vs.extend(&cfg.hidden);
        vs.push(1);
        let q = Mlp::new(&qs, cfg.activation, rng);
        let v = Mlp::new(&vs, cfg.activation, rng);
        Self::from_parts(q, v, cfg.tau, cfg.gamma)
    }

    pub fn from_parts(q: Mlp, v: Mlp, tau: f64, gamma: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidArgument(format!("expectile tau must lie in (0, 1), got {tau}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("discount must lie in [0, 1], got {gamma}")));
        }
        let state_dim = v.input_dim();
        if q.input_dim() <= state_dim || q.output_dim() != 1 || v.output_dim() != 1 {
            return Err(Error::shape("Critic", format!("Q sizes {:?}, V sizes {:?}", q.sizes(), v.sizes())));
        }
        let action_dim = q.input_dim() - state_dim;
        Ok(Self { q, v, tau, gamma, state_dim, action_dim })
    }

    pub fn q_net(&self) -> &Mlp {
        &self.q
    }

    pub fn v_net(&self) -> &Mlp {
        &self.v
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn check(&self, s: &Tensor, a: Option<&Tensor>) -> Result<()> {
        let ok = s.cols() == self.state_dim && a.is_none_or(|a| a.cols() == self.action_dim && a.rows() == s.rows());
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "Critic",
                format!("s {:?}, a {:?} for dims ({}, {})", s.shape(), a.map(Tensor::shape), self.state_dim, self.action_dim),
            ))
        }
    }
}

impl ActionValue for Critic {
    fn q_var<'t>(&self, s: &Tensor, a: Var<'t>) -> Result<Var<'t>> {
        self.check(s, Some(&a.value()))?;
        let tape = a.tape();
        let p = self.q.bind(tape, false);
        Ok(self.q.forward(&p, tape.concat_cols(&[tape.constant(s.clone()), a])))
    }

    fn q_values(&self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
        self.check(s, Some(a))?;
        Ok(self.q.eval(&Tensor::hstack(&[s, a])?))
    }

    fn v_values(&self, s: &Tensor) -> Result<Tensor> {
        self.check(s, None)?;
        Ok(self.v.eval(s))
    }
}

/// Analytic critic `Q(s, a) = w·a + c`, `V(s) = v`, for tasks with known values.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCritic {
    pub w: Vec<f64>,
    pub c: f64,
    pub v: f64,
}

impl ActionValue for LinearCritic {
    fn q_var<'t>(&self, _s: &Tensor, a: Var<'t>) -> Result<Var<'t>> {
        let w = Tensor::matrix(self.w.len(), 1, self.w.clone())?;
        Ok(a.matmul(a.tape().constant(w)).add_scalar(self.c))
    }

    fn q_values(&self, _s: &Tensor, a: &Tensor) -> Result<Tensor> {
        let w = Tensor::matrix(self.w.len(), 1, self.w.clone())?;
        Ok(a.matmul(&w)?.map(|q| q + self.c))
    }

    fn v_values(&self, s: &Tensor) -> Result<Tensor> {
        Ok(Tensor::full(&[s.rows(), 1], self.v))
    }
}

/// Critic plus the two optimizer states.
pub struct IqlTrainer {
    pub critic: Critic,
    q_opt: Adam,
    v_opt: Adam,
    steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IqlLosses {
    pub v_loss: f64,
    pub q_loss: f64,
}

impl IqlTrainer {
    pub fn new(critic: Critic, lr: f64) -> Self {
        let opt = AdamConfig::with_lr(lr);
        let q_opt = Adam::new(opt, critic.q.params());
        let v_opt = Adam::new(opt, critic.v.params());
        Self { critic, q_opt, v_opt, steps: 0 }
    }

    /// One V step (Q fixed) followed by one Q step (V fixed).
    pub fn step(&mut self, batch: &Batch) -> Result<IqlLosses> {
        self.steps += 1;
        let c = &self.critic;
        c.check(&batch.states, Some(&batch.actions))?;
        let diverged = |what: &str, e: Error| match e {
            e if e.is_numeric() => Error::TrainingDiverged { step: self.steps, detail: format!("{what}: {e}") },
            e => e,
        };

        let q_sa = c.q_values(&batch.states, &batch.actions)?;
        let (v_loss, v_grads) = {
            let tape = Tape::new();
            let p = c.v.bind(&tape, true);
            let v = c.v.forward(&p, tape.constant(batch.states.clone()));
            let loss = expectile_loss(tape.constant(q_sa) - v, c.tau);
            let g = tape.backward(loss).map_err(|e| diverged("value loss", e))?;
            (loss.item(), g.wrt_all(&p))
        };
        self.v_opt.step(self.critic.v.params_mut(), &v_grads).map_err(|e| diverged("value update", e))?;

        let c = &self.critic;
        let v_next = c.v.eval(&batch.next_states);
        let target: Vec<f64> = (0..batch.rewards.rows())
            .map(|i| batch.rewards.data()[i] + c.gamma * (1.0 - batch.dones.data()[i]) * v_next.data()[i])
            .collect();
        let (q_loss, q_grads) = {
            let tape = Tape::new();
            let p = c.q.bind(&tape, true);
            let input = Tensor::hstack(&[&batch.states, &batch.actions])?;
            let q = c.q.forward(&p, tape.constant(input));
            let loss = (q - tape.constant(Tensor::column(target))).square().mean();
            let g = tape.backward(loss).map_err(|e| diverged("Q loss", e))?;
            (loss.item(), g.wrt_all(&p))
        };
        self.q_opt.step(self.critic.q.params_mut(), &q_grads).map_err(|e| diverged("Q update", e))?;
        Ok(IqlLosses { v_loss, q_loss })
    }
}

/// Trains a fresh critic on `dataset`; returns it with per-step losses.
pub fn train_critic<R: Rng + ?Sized>(
    dataset: &OfflineDataset,
    cfg: &CriticConfig,
    rng: &mut R,
) -> Result<(Critic, Vec<IqlLosses>)> {
    let critic = Critic::new(cfg, dataset.state_dim(), dataset.action_dim(), rng)?;
    let mut trainer = IqlTrainer::new(critic, cfg.lr);
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = dataset.sample_batch(cfg.batch_size, rng)?;
        log.push(trainer.step(&batch)?);
    }
    Ok((trainer.critic, log))
}
