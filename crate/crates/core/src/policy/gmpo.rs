use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_policy, matching_loop, GenerativePolicy, MetricsRow, RegressionBatch, TrainConfig};
use crate::critic::ActionValue;
use crate::data::OfflineDataset;
use crate::error::{Error, Result};
use crate::matching::MatchingConfig;
use crate::numerics::Tensor;

/// How advantage weights are formed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum WeightMode {
    /// `min(e^{β(Q−V)}, w_max)` on dataset actions, partition function taken as 1.
    Exponential { w_max: f64 },
    /// Softmax of `βQ` over `k` actions drawn from the behavior policy per state.
    Softmax { k: usize },
}

impl Default for WeightMode {
    fn default() -> Self {
        WeightMode::Exponential { w_max: 100.0 }
    }
}

impl WeightMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightMode::Exponential { w_max } if !(w_max > 0.0) => {
                Err(Error::InvalidArgument(format!("w_max must be positive, got {w_max}")))
            }
            WeightMode::Softmax { k } if k < 2 => Err(Error::InvalidArgument(format!("softmax needs k >= 2, got {k}"))),
            _ => Ok(()),
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    // β = 0 is allowed: it is the documented reduction to plain matching.
    if beta >= 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be finite and non-negative, got {beta}")))
    }
}

/// Clamped exponential weights and the advantages they came from.
pub fn exponential_weights<C: ActionValue + ?Sized>(
    critic: &C,
    s: &Tensor,
    a: &Tensor,
    beta: f64,
    w_max: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_beta(beta)?;
    WeightMode::Exponential { w_max }.validate()?;
    let adv = critic.advantage(s, a)?;
    let w = adv.iter().map(|&u| (beta * u).exp().min(w_max)).collect();
    Ok((w, adv))
}

/// `e^{βq_i} / Σ_j e^{βq_j}` with the maximum subtracted first.
pub fn softmax_weights(q: &[f64], beta: f64) -> Vec<f64> {
    let m = q.iter().map(|&q| beta * q).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|&q| (beta * q - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|e| e / z).collect()
}

/// Per-row weights. In softmax mode rows come in consecutive groups of `k`
/// sharing a state and each group's weights sum to one.
pub fn gmpo_weight<C: ActionValue + ?Sized>(
    critic: &C,
    s: &Tensor,
    a: &Tensor,
    beta: f64,
    mode: WeightMode,
) -> Result<Vec<f64>> {
    check_beta(beta)?;
    mode.validate()?;
    match mode {
        WeightMode::Exponential { w_max } => Ok(exponential_weights(critic, s, a, beta, w_max)?.0),
        WeightMode::Softmax { k } => {
            if s.rows() % k != 0 {
                return Err(Error::shape("gmpo_weight", format!("{} rows in groups of {k}", s.rows())));
            }
            let q = critic.q_values(s, a)?;
            Ok(q.data().chunks(k).flat_map(|g| softmax_weights(g, beta)).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmpoConfig {
    pub beta: f64,
    pub weight: WeightMode,
    pub matching: MatchingConfig,
    pub train: TrainConfig,
}

impl Default for GmpoConfig {
    fn default() -> Self {
        Self { beta: 1.0, weight: WeightMode::default(), matching: MatchingConfig::default(), train: TrainConfig::default() }
    }
}

/// Advantage-weighted matching regression. `policy` is trained in place,
/// normally from a fresh initialization. Softmax mode draws its candidate
/// actions from `behavior`; exponential mode uses dataset actions only.
pub fn train_gmpo<C: ActionValue + ?Sized, R: Rng + ?Sized>(
    dataset: &OfflineDataset,
    critic: &C,
    policy: &mut GenerativePolicy,
    behavior: Option<&GenerativePolicy>,
    cfg: &GmpoConfig,
    rng: &mut R,
) -> Result<Vec<MetricsRow>> {
    check_beta(cfg.beta)?;
    cfg.weight.validate()?;
    let eval = |p: &GenerativePolicy| evaluate_policy(p, critic, dataset, cfg.train.eval_states, cfg.train.eval_seed);
    match cfg.weight {
        WeightMode::Exponential { w_max } => {
            matching_loop(policy, dataset, &cfg.matching, &cfg.train, Some(&eval), rng, |b, _| {
                let (w, adv) = exponential_weights(critic, &b.states, &b.actions, cfg.beta, w_max)?;
                let mean_advantage = Some(adv.iter().sum::<f64>() / adv.len() as f64);
                Ok(RegressionBatch { states: b.states.clone(), actions: b.actions.clone(), weights: Some(w), mean_advantage })
            })
        }
        WeightMode::Softmax { k } => {
            let mu = behavior.ok_or_else(|| {
                Error::InvalidArgument("softmax weighting needs a pretrained behavior policy".into())
            })?;
            if mu.state_dim() != policy.state_dim() || mu.action_dim() != policy.action_dim() {
                return Err(Error::shape("train_gmpo", "behavior and policy dimensions differ".to_string()));
            }
            matching_loop(policy, dataset, &cfg.matching, &cfg.train, Some(&eval), rng, |b, rng| {
                let idx: Vec<usize> = (0..b.states.rows()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
                let states = b.states.select_rows(&idx);
                let actions = mu.act(&states, rng)?;
                let q = critic.q_values(&states, &actions)?;
                let v = critic.v_values(&states)?;
                let adv = q.data().iter().zip(v.data()).map(|(q, v)| q - v).sum::<f64>() / q.rows() as f64;
                // Scaled by k so the per-state weights average to one over the batch.
                let w = q.data().chunks(k).flat_map(|g| softmax_weights(g, cfg.beta)).map(|w| w * k as f64).collect();
                Ok(RegressionBatch { states, actions, weights: Some(w), mean_advantage: Some(adv) })
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::LinearCritic;
    use crate::data::make_tilted_gaussian_bandit;
    use crate::policy::pretrain_behavior;
    use crate::policy::tests::small_policy;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_critic() -> LinearCritic {
        LinearCritic { w: vec![1.0], c: 0.0, v: 0.0 }
    }

    #[test]
    fn exponential_examples() {
        let s = Tensor::zeros(&[3, 1]);
        let a = Tensor::column(vec![0.0, 10.0, -1.0]);
        let w = gmpo_weight(&unit_critic(), &s, &a, 1.0, WeightMode::Exponential { w_max: 100.0 }).unwrap();
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 100.0);
        assert!((w[2] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn bad_arguments() {
        let s = Tensor::zeros(&[2, 1]);
        let a = Tensor::zeros(&[2, 1]);
        let c = unit_critic();
        assert!(gmpo_weight(&c, &s, &a, -1.0, WeightMode::default()).is_err());
        assert!(gmpo_weight(&c, &s, &a, f64::NAN, WeightMode::default()).is_err());
        assert!(gmpo_weight(&c, &s, &a, 1.0, WeightMode::Exponential { w_max: 0.0 }).is_err());
        assert!(gmpo_weight(&c, &s, &a, 1.0, WeightMode::Softmax { k: 1 }).is_err());
        assert!(gmpo_weight(&c, &Tensor::zeros(&[3, 1]), &Tensor::zeros(&[3, 1]), 1.0, WeightMode::Softmax { k: 2 }).is_err());
    }

    #[test]
    fn softmax_extreme_values_stay_finite() {
        let w = softmax_weights(&[1000.0, 999.0, -1e6], 10.0);
        assert!(w.iter().all(|w| w.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[0] > 0.99);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            q in prop::collection::vec(-50.0f64..50.0, 2..10),
            beta in 0.0f64..5.0,
            shift in -100.0f64..100.0,
        ) {
            let w = softmax_weights(&q, beta);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = q.iter().map(|q| q + shift).collect();
            let w2 = softmax_weights(&shifted, beta);
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_temperature_matches_pretraining_bit_for_bit() {
        let (ds, _) = make_tilted_gaussian_bandit(1, 1.0, 256, 3).unwrap();
        let train = TrainConfig { steps: 5, batch_size: 32, ..Default::default() };
        let mut a = small_policy(7, 1, 1);
        let mut b = a.clone();
        let base = pretrain_behavior(&ds, &mut a, &MatchingConfig::cfm(), &train, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let cfg = GmpoConfig { beta: 0.0, train: train.clone(), ..Default::default() };
        let tilted = train_gmpo(&ds, &unit_critic(), &mut b, None, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        for (x, y) in base.iter().zip(&tilted) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(y.mean_weight, 1.0);
        }
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn softmax_mode_requires_behavior() {
        let (ds, _) = make_tilted_gaussian_bandit(1, 1.0, 64, 3).unwrap();
        let mut p = small_policy(0, 1, 1);
        let cfg = GmpoConfig { weight: WeightMode::Softmax { k: 4 }, ..Default::default() };
        let r = train_gmpo(&ds, &unit_critic(), &mut p, None, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        let mu = small_policy(1, 1, 1);
        let cfg = GmpoConfig { train: TrainConfig { steps: 2, batch_size: 4, ..Default::default() }, ..cfg };
        let log = train_gmpo(&ds, &unit_critic(), &mut p, Some(&mu), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((log[0].mean_weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dsm_on_icfm_rejected() {
        let (ds, _) = make_tilted_gaussian_bandit(1, 1.0, 64, 3).unwrap();
        let mut p = small_policy(0, 1, 1);
        let cfg = GmpoConfig { matching: MatchingConfig::dsm(crate::matching::Lambda::Vanilla), ..Default::default() };
        assert!(train_gmpo(&ds, &unit_critic(), &mut p, None, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
