use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam moments for one parameter list.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self { config, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap()];
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3), &p);
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.steps_taken(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(0.5)];
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3), &p);
        opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let delta = 0.5 - p[0].item();
        let want = 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((delta - want).abs() < 1e-15, "{delta} vs {want}");
    }

    #[test]
    fn paper_default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 1e-4);
    }

    #[test]
    fn rejects_shape_mismatch_and_nan() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        assert!(matches!(opt.step(&mut p, &[Tensor::zeros(&[3])]), Err(Error::Shape { .. })));
        let bad = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(opt.step(&mut p, &[bad]), Err(Error::NonFinite(_))));
        assert_eq!(opt.steps_taken(), 0);
    }
}
