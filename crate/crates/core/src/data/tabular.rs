use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetMeta, OfflineDataset};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Deterministic finite MDP. Reaching a terminal state ends the episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub next: Vec<Vec<usize>>,
    pub reward: Vec<Vec<f64>>,
    pub terminal: Vec<bool>,
}

impl TabularMdp {
    /// `n`-state chain: action 0 stays, action 1 moves right; entering the
    /// last (terminal) state pays 1.
    pub fn chain(n: usize) -> Self {
        let next = (0..n).map(|s| vec![s, (s + 1).min(n - 1)]).collect();
        let reward = (0..n).map(|s| vec![0.0, if s + 2 == n { 1.0 } else { 0.0 }]).collect();
        let terminal = (0..n).map(|s| s + 1 == n).collect();
        Self { next, reward, terminal }
    }

    pub fn states(&self) -> usize {
        self.next.len()
    }

    pub fn actions(&self) -> usize {
        self.next.first().map_or(0, Vec::len)
    }

    pub fn one_hot(index: usize, width: usize) -> Vec<f64> {
        let mut v = vec![0.0; width];
        v[index] = 1.0;
        v
    }
}

/// Uniform `(s, a)` pairs over non-terminal states with one-hot states and actions.
pub fn make_tabular(mdp: &TabularMdp, n: usize, seed: u64) -> Result<OfflineDataset> {
    let (ns, na) = (mdp.states(), mdp.actions());
    let live: Vec<usize> = (0..ns).filter(|&s| !mdp.terminal[s]).collect();
    if live.is_empty() || na == 0 {
        return Err(Error::InvalidArgument("tabular MDP has no non-terminal state or no action".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s, mut a, mut r, mut sn, mut d) = (vec![], vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let st = live[rng.random_range(0..live.len())];
        let ac = rng.random_range(0..na);
        let nx = mdp.next[st][ac];
        s.extend(TabularMdp::one_hot(st, ns));
        a.extend(TabularMdp::one_hot(ac, na));
        r.push(mdp.reward[st][ac]);
        sn.extend(TabularMdp::one_hot(nx, ns));
        d.push(if mdp.terminal[nx] { 1.0 } else { 0.0 });
    }
    let meta = DatasetMeta { task: "tabular".into(), seed, ..Default::default() };
    OfflineDataset::new(
        Tensor::matrix(n, ns, s)?,
        Tensor::matrix(n, na, a)?,
        Tensor::column(r),
        Tensor::matrix(n, ns, sn)?,
        Tensor::column(d),
        meta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_structure() {
        let m = TabularMdp::chain(4);
        assert_eq!(m.next[2], vec![2, 3]);
        assert_eq!(m.reward[2][1], 1.0);
        let d = make_tabular(&m, 100, 1).unwrap();
        assert_eq!((d.state_dim(), d.action_dim()), (4, 2));
        for i in 0..d.len() {
            assert_eq!(d.dones.data()[i] == 1.0, d.next_states.row(i)[3] == 1.0);
        }
    }
}
