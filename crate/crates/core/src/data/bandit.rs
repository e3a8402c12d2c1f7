use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetMeta, OfflineDataset};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Closed-form optimal policy of the tilted bandit: `N(β·1, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TiltedTarget {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Single-state bandit with behavior `a ~ N(0, I)` and reward `Σ a_i`.
/// Since `e^{β Σa} N(a; 0, I) ∝ N(a; β·1, I)`, the returned target is the
/// optimal policy at temperature `β`.
pub fn make_tilted_gaussian_bandit(dims: usize, beta: f64, n: usize, seed: u64) -> Result<(OfflineDataset, TiltedTarget)> {
    if dims == 0 {
        return Err(Error::InvalidArgument("bandit needs at least one action dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions = Tensor::randn(&[n, dims], &mut rng);
    let rewards = Tensor::column((0..n).map(|i| actions.row(i).iter().sum()).collect());
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("beta".into(), beta.to_string());
    let meta = DatasetMeta { task: "tilted_bandit".into(), seed, extra, ..Default::default() };
    let ds = OfflineDataset::new(
        Tensor::zeros(&[n, 1]),
        actions,
        rewards,
        Tensor::zeros(&[n, 1]),
        Tensor::ones(&[n, 1]),
        meta,
    )?;
    Ok((ds, TiltedTarget { mean: vec![beta; dims], variance: vec![1.0; dims] }))
}
