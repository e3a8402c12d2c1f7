#![allow(dead_code)]

use flowpolicy::matching::{matching_loss, MatchingConfig};
use flowpolicy::model::{GenerativeModel, ModelConfig};
use flowpolicy::numerics::{Adam, AdamConfig, Tape, Tensor};
use flowpolicy::schedules::{Parameterization, PathSchedule};
use flowpolicy::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` rows of `N(mean, std² I)`.
pub fn gaussian(n: usize, mean: &[f64], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let d = mean.len();
    let z = Tensor::randn(&[n, d], rng);
    let data = z.data().iter().enumerate().map(|(i, v)| mean[i % d] + std * v).collect();
    Tensor::matrix(n, d, data).unwrap()
}

pub fn unconditional(
    schedule: PathSchedule,
    param: Parameterization,
    hidden: Vec<usize>,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> GenerativeModel {
    let cfg = ModelConfig { schedule, parameterization: param, hidden, time_embed_width: 16, ..Default::default() };
    GenerativeModel::new(cfg, dim, 0, rng).unwrap()
}

/// Adam on the matching loss with fresh batches from `sample`.
pub fn fit(
    model: &mut GenerativeModel,
    cfg: &MatchingConfig,
    steps: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Tensor,
) -> Result<f64> {
    let mut opt = Adam::new(AdamConfig::with_lr(lr), model.params());
    let mut last = f64::NAN;
    for _ in 0..steps {
        let x = sample(rng);
        let grads = {
            let tape = Tape::new();
            let p = model.bind(&tape, true);
            let loss = matching_loss(model, &p, cfg, &x, None, None, rng)?;
            last = loss.item();
            tape.backward(loss)?.wrt_all(&p)
        };
        opt.step(model.params_mut(), &grads)?;
    }
    Ok(last)
}

/// Points of a `k × k` grid over `[lo, hi]²`, row-major.
pub fn grid2(lo: f64, hi: f64, k: usize) -> Tensor {
    let h = (hi - lo) / (k - 1) as f64;
    let mut data = Vec::with_capacity(2 * k * k);
    for i in 0..k {
        for j in 0..k {
            data.push(lo + i as f64 * h);
            data.push(lo + j as f64 * h);
        }
    }
    Tensor::matrix(k * k, 2, data).unwrap()
}

pub fn row_norm(t: &Tensor, r: usize) -> f64 {
    t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean of `‖a_i − b_i‖ / ‖b_i‖` over rows.
pub fn mean_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).unwrap();
    (0..a.rows()).map(|r| row_norm(&diff, r) / row_norm(b, r)).sum::<f64>() / a.rows() as f64
}

pub mod bandit {
    use super::*;
    use flowpolicy::critic::LinearCritic;
    use flowpolicy::data::{make_tilted_gaussian_bandit, OfflineDataset};
    use flowpolicy::likelihood::{log_prob_values, TraceMode};
    use flowpolicy::policy::{pretrain_behavior, GenerativePolicy, TrainConfig};
    use flowpolicy::sampler::{Scheme, SolverSpec};

    pub const EVAL: usize = 4096;

    pub fn dataset() -> OfflineDataset {
        make_tilted_gaussian_bandit(1, 1.0, 10_000, 0).unwrap().0
    }

    /// `Q(s, a) = a`, `V = β/2`: the exact critic of the β = 1 bandit.
    pub fn critic() -> LinearCritic {
        LinearCritic { w: vec![1.0], c: 0.0, v: 0.5 }
    }

    pub fn fresh_policy(rng: &mut ChaCha8Rng) -> GenerativePolicy {
        let cfg = ModelConfig { hidden: vec![64, 64], time_embed_width: 16, ..Default::default() };
        GenerativePolicy::new(GenerativeModel::new(cfg, 1, 1, rng).unwrap(), SolverSpec::new(Scheme::Midpoint, 16).unwrap())
            .unwrap()
    }

    pub fn train_config() -> TrainConfig {
        TrainConfig { steps: 2000, batch_size: 256, lr: 1e-3, ..Default::default() }
    }

    pub fn behavior(ds: &OfflineDataset, rng: &mut ChaCha8Rng) -> GenerativePolicy {
        let mut mu = fresh_policy(rng);
        pretrain_behavior(ds, &mut mu, &MatchingConfig::cfm(), &train_config(), rng).unwrap();
        mu
    }

    /// Mean and standard deviation of `EVAL` actions at the zero state.
    pub fn moments(p: &GenerativePolicy, seed: u64) -> (f64, f64) {
        let a = p.act(&Tensor::zeros(&[EVAL, 1]), &mut super::rng(seed)).unwrap();
        (a.column_means()[0], a.column_stds()[0])
    }

    /// Monte-Carlo `KL(π ‖ N(1, 1))` from `n` policy samples and exact-trace
    /// log-likelihoods; returns the estimate and its standard error.
    pub fn reverse_kl(p: &GenerativePolicy, n: usize, seed: u64) -> (f64, f64) {
        let mut r = super::rng(seed);
        let s = Tensor::zeros(&[n, 1]);
        let a = p.act(&s, &mut r).unwrap();
        let (lp, _) = log_prob_values(&p.model, &a, Some(&s), &p.solver, &TraceMode::Exact, &mut r).unwrap();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let ratio: Vec<f64> =
            lp.iter().zip(a.data()).map(|(l, x)| l + half_ln_2pi + 0.5 * (x - 1.0) * (x - 1.0)).collect();
        let mean = ratio.iter().sum::<f64>() / n as f64;
        let var = ratio.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (mean, (var / n as f64).sqrt())
    }
}
