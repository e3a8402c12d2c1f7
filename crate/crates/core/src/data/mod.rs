//! Offline datasets and synthetic tasks with known structure.

mod bandit;
mod io;
mod swiss_roll;
mod tabular;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use bandit::{make_tilted_gaussian_bandit, TiltedTarget};
pub use io::{load_dataset, read_csv, read_binary, save_dataset, write_binary, write_csv, DatasetFormat};
pub use swiss_roll::{make_swiss_roll, nearest_distances, SwissRollTask};
pub use tabular::{make_tabular, TabularMdp};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: String,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Task-specific parameters, stored as strings.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// Row-aligned transitions `(s, a, r, s', done)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    pub dones: Tensor,
    pub meta: DatasetMeta,
}

/// A minibatch of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    pub dones: Tensor,
}

impl OfflineDataset {
    pub fn new(
        states: Tensor,
        actions: Tensor,
        rewards: Tensor,
        next_states: Tensor,
        dones: Tensor,
        mut meta: DatasetMeta,
    ) -> Result<Self> {
        let n = states.rows();
        let (sd, ad) = (states.cols(), actions.cols());
        let shapes = [
            ("a", actions.rows(), ad, ad),
            ("r", rewards.rows(), rewards.cols(), 1),
            ("s'", next_states.rows(), next_states.cols(), sd),
            ("done", dones.rows(), dones.cols(), 1),
        ];
        for (name, rows, cols, want) in shapes {
            if rows != n || cols != want {
                return Err(Error::shape("OfflineDataset", format!("{name} is [{rows}, {cols}], expected [{n}, {want}]")));
            }
        }
        let parts = [("s", &states), ("a", &actions), ("r", &rewards), ("s'", &next_states), ("done", &dones)];
        for (name, t) in parts {
            if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite {name} in row {}", i / t.cols().max(1))));
            }
        }
        if let Some(i) = dones.data().iter().position(|&d| d != 0.0 && d != 1.0) {
            return Err(Error::InvalidArgument(format!("done must be 0 or 1, row {i} has {}", dones.data()[i])));
        }
        meta.state_dim = sd;
        meta.action_dim = ad;
        Ok(Self { states, actions, rewards, next_states, dones, meta })
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.meta.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.meta.action_dim
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            states: self.states.select_rows(idx),
            actions: self.actions.select_rows(idx),
            rewards: self.rewards.select_rows(idx),
            next_states: self.next_states.select_rows(idx),
            dones: self.dones.select_rows(idx),
        }
    }

    /// Uniform indices with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("cannot sample from an empty dataset".into()));
        }
        Ok((0..size).map(|_| rng.random_range(0..self.len())).collect())
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Batch> {
        Ok(self.batch(&self.sample_indices(size, rng)?))
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.mean()
    }
}
