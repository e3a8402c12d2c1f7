use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetMeta, OfflineDataset};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par;

/// Swiss-roll bandit: actions are noisy points on the spiral
/// `θ (cos θ, sin θ)` and the reward is linear in the angle `θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwissRollTask {
    pub n: usize,
    pub noise: f64,
    pub angle_min: f64,
    pub angle_max: f64,
    pub value_min: f64,
    pub value_max: f64,
    /// Applied to the noisy point.
    pub scale: f64,
    pub seed: u64,
}

impl Default for SwissRollTask {
    fn default() -> Self {
        Self {
            n: 10_000,
            noise: 0.6,
            angle_min: 1.5 * PI,
            angle_max: 4.5 * PI,
            value_min: -3.5,
            value_max: 1.5,
            scale: 1.0,
            seed: 0,
        }
    }
}

const CURVE_POINTS: usize = 20_000;

impl SwissRollTask {
    pub fn value_of_angle(&self, theta: f64) -> f64 {
        let u = (theta - self.angle_min) / (self.angle_max - self.angle_min);
        self.value_min + u * (self.value_max - self.value_min)
    }

    /// Mean value under uniform angles.
    pub fn mean_value(&self) -> f64 {
        0.5 * (self.value_min + self.value_max)
    }

    pub fn curve_point(&self, theta: f64) -> [f64; 2] {
        [self.scale * theta * theta.cos(), self.scale * theta * theta.sin()]
    }

    /// Value of the nearest point on the noiseless spiral, evaluated on a
    /// dense grid of angles.
    pub fn value_of_points(&self, points: &Tensor) -> Result<Vec<f64>> {
        if points.cols() != 2 {
            return Err(Error::shape("SwissRollTask::value_of_points", format!("{} columns", points.cols())));
        }
        let step = (self.angle_max - self.angle_min) / (CURVE_POINTS - 1) as f64;
        let curve: Vec<(f64, [f64; 2])> = (0..CURVE_POINTS)
            .map(|k| {
                let th = self.angle_min + k as f64 * step;
                (th, self.curve_point(th))
            })
            .collect();
        Ok(par::map_range(points.rows(), |i| {
            let p = points.row(i);
            let (mut best, mut best_th) = (f64::INFINITY, self.angle_min);
            for (th, c) in &curve {
                let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                if d < best {
                    best = d;
                    best_th = *th;
                }
            }
            self.value_of_angle(best_th)
        }))
    }
}

/// For each row of `points`, the Euclidean distance to the nearest row of `reference`.
pub fn nearest_distances(points: &Tensor, reference: &Tensor) -> Result<Vec<f64>> {
    if points.cols() != reference.cols() {
        return Err(Error::shape("nearest_distances", format!("{} vs {} columns", points.cols(), reference.cols())));
    }
    Ok(par::map_range(points.rows(), |i| {
        let p = points.row(i);
        (0..reference.rows())
            .map(|j| reference.row(j).iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }))
}

pub fn make_swiss_roll(task: &SwissRollTask) -> Result<OfflineDataset> {
    if task.n == 0 {
        return Err(Error::InvalidArgument("swiss roll needs at least one sample".into()));
    }
    if !(task.angle_max > task.angle_min) || task.noise < 0.0 || task.scale <= 0.0 {
        return Err(Error::InvalidArgument("invalid swiss roll parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut actions = Vec::with_capacity(task.n * 2);
    let mut rewards = Vec::with_capacity(task.n);
    for _ in 0..task.n {
        let theta = rng.random_range(task.angle_min..task.angle_max);
        let noise = Tensor::randn(&[2], &mut rng);
        let base = [theta * theta.cos(), theta * theta.sin()];
        actions.push(task.scale * (base[0] + task.noise * noise.data()[0]));
        actions.push(task.scale * (base[1] + task.noise * noise.data()[1]));
        rewards.push(task.value_of_angle(theta));
    }
    let n = task.n;
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("noise".into(), task.noise.to_string());
    extra.insert("scale".into(), task.scale.to_string());
    extra.insert("angle_range".into(), format!("{},{}", task.angle_min, task.angle_max));
    extra.insert("value_range".into(), format!("{},{}", task.value_min, task.value_max));
    extra.insert("value_map".into(), "linear_in_angle".into());
    let meta = DatasetMeta { task: "swiss_roll".into(), seed: task.seed, extra, ..Default::default() };
    OfflineDataset::new(
        Tensor::zeros(&[n, 1]),
        Tensor::matrix(n, 2, actions)?,
        Tensor::column(rewards),
        Tensor::zeros(&[n, 1]),
        Tensor::ones(&[n, 1]),
        meta,
    )
}
