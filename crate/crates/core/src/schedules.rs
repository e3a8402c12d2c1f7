//! Probability paths: VP-SDE, GVP and I-CFM.
//!
//! Diffusion kinds put data at `t = 0` and noise at `t = 1`, with
//! `x_t = α_t x_0 + σ_t ε`. I-CFM puts the source (noise) sample at `t = 0`
//! and data at `t = 1`, with `x_t = t x_1 + (1 - t) x_0 + σ ε`. Callers that
//! generate or evaluate likelihoods use [`PathSchedule::prior_time`] and
//! [`PathSchedule::data_time`] and never need to know the orientation.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Schedule functions are evaluated on `[T_EPS, 1 - T_EPS]`.
pub const T_EPS: f64 = 1e-3;

/// Conditional scores need `σ_t` at least this large.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathSchedule {
    /// Linear `β_t = β_min + t (β_max - β_min)`.
    VpSde { beta_min: f64, beta_max: f64 },
    /// `α_t = cos(πt/2)`, `σ_t = sin(πt/2)`.
    Gvp,
    /// Straight conditional paths with constant path noise `sigma`.
    Icfm { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Velocity,
    Noise,
    Score,
}

/// A point on a conditional path and the Gaussian noise used to reach it.
#[derive(Clone, Debug)]
pub struct PathPoint {
    pub x_t: Tensor,
    pub noise: Tensor,
}

impl Default for PathSchedule {
    fn default() -> Self {
        Self::Gvp
    }
}

impl PathSchedule {
    pub fn vp_sde() -> Self {
        Self::VpSde { beta_min: 0.1, beta_max: 20.0 }
    }

    pub fn gvp() -> Self {
        Self::Gvp
    }

    pub fn icfm() -> Self {
        Self::Icfm { sigma: 0.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::VpSde { .. } => "vpsde",
            Self::Gvp => "gvp",
            Self::Icfm { .. } => "icfm",
        }
    }

    pub fn is_diffusion(&self) -> bool {
        !matches!(self, Self::Icfm { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::VpSde { beta_min, beta_max } if !(beta_min > 0.0 && beta_max >= beta_min) => {
                Err(Error::InvalidArgument(format!("VP-SDE needs 0 < beta_min <= beta_max, got {beta_min}, {beta_max}")))
            }
            Self::Icfm { sigma } if !(sigma >= 0.0) => {
                Err(Error::InvalidArgument(format!("I-CFM path noise must be >= 0, got {sigma}")))
            }
            _ => Ok(()),
        }
    }

    /// Time at which samples are data.
    pub fn data_time(&self) -> f64 {
        if self.is_diffusion() {
            T_EPS
        } else {
            1.0 - T_EPS
        }
    }

    /// Time at which samples follow the standard normal prior.
    pub fn prior_time(&self) -> f64 {
        if self.is_diffusion() {
            1.0 - T_EPS
        } else {
            T_EPS
        }
    }

    /// Whether `param` can be turned into a velocity on this path.
    pub fn supports(&self, param: Parameterization) -> bool {
        self.is_diffusion() || param == Parameterization::Velocity
    }

    fn unsupported(&self, what: &str) -> Error {
        Error::Unsupported(format!("{what} is not defined for the {} schedule", self.name()))
    }

    /// `(α_t, σ_t)` in closed form.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        match *self {
            Self::VpSde { beta_min, beta_max } => {
                let integral = beta_min * t + 0.5 * (beta_max - beta_min) * t * t;
                Ok(((-0.5 * integral).exp(), (-(-integral).exp_m1()).sqrt()))
            }
            Self::Gvp => Ok(((FRAC_PI_2 * t).cos(), (FRAC_PI_2 * t).sin())),
            Self::Icfm { .. } => Err(self.unsupported("alpha/sigma")),
        }
    }

    /// `(dα/dt, dσ/dt)` in closed form.
    pub fn alpha_sigma_dt(&self, t: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        let out = match *self {
            Self::VpSde { beta_min, beta_max } => {
                let beta = beta_min + t * (beta_max - beta_min);
                let (alpha, sigma) = self.alpha_sigma(t)?;
                (-0.5 * beta * alpha, beta * alpha * alpha / (2.0 * sigma))
            }
            Self::Gvp => (-FRAC_PI_2 * (FRAC_PI_2 * t).sin(), FRAC_PI_2 * (FRAC_PI_2 * t).cos()),
            Self::Icfm { .. } => return Err(self.unsupported("alpha/sigma")),
        };
        if out.0.is_finite() && out.1.is_finite() {
            Ok(out)
        } else {
            Err(Error::NumericDomain(format!("schedule derivative at t = {t}")))
        }
    }

    /// Drift `f(t) = d log α / dt` and squared diffusion
    /// `g²(t) = dσ²/dt - 2 f σ²`, with `t` clipped to `[T_EPS, 1 - T_EPS]`.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        let t = clip(t);
        let (f, g2) = match *self {
            Self::VpSde { beta_min, beta_max } => {
                let beta = beta_min + t * (beta_max - beta_min);
                (-0.5 * beta, beta)
            }
            Self::Gvp => {
                let tan = (FRAC_PI_2 * t).tan();
                (-FRAC_PI_2 * tan, std::f64::consts::PI * tan)
            }
            Self::Icfm { .. } => return Err(self.unsupported("drift/diffusion")),
        };
        if f.is_finite() && g2.is_finite() {
            Ok((f, g2))
        } else {
            Err(Error::NumericDomain(format!("drift/diffusion at t = {t}")))
        }
    }

    /// Draws `x_t` between the two endpoints at per-row times `t`.
    ///
    /// Diffusion kinds: `x0` is data and `x1_or_noise` is the Gaussian noise
    /// `ε`, which is returned unchanged. I-CFM: `x0` is the source sample,
    /// `x1_or_noise` the target sample, and path noise is drawn from `rng`
    /// only when `σ > 0` (zeros otherwise).
    pub fn sample_path_point<R: Rng + ?Sized>(
        &self,
        x0: &Tensor,
        x1_or_noise: &Tensor,
        t: &[f64],
        rng: &mut R,
    ) -> Result<PathPoint> {
        check_rows("sample_path_point", x0, x1_or_noise, t)?;
        let cols = x0.cols();
        let mut out = vec![0.0; x0.len()];
        let noise = match *self {
            Self::Icfm { sigma } => {
                let noise = if sigma > 0.0 {
                    Tensor::randn(x0.shape(), rng)
                } else {
                    Tensor::zeros(x0.shape())
                };
                for (i, o) in out.iter_mut().enumerate() {
                    let ti = t[i / cols];
                    *o = ti * x1_or_noise.data()[i] + (1.0 - ti) * x0.data()[i] + sigma * noise.data()[i];
                }
                noise
            }
            _ => {
                let coeffs = t.iter().map(|&ti| self.alpha_sigma(ti)).collect::<Result<Vec<_>>>()?;
                for (i, o) in out.iter_mut().enumerate() {
                    let (a, s) = coeffs[i / cols];
                    *o = a * x0.data()[i] + s * x1_or_noise.data()[i];
                }
                x1_or_noise.clone()
            }
        };
        Ok(PathPoint { x_t: Tensor::new(x0.shape().to_vec(), out)?, noise })
    }

    /// Conditional score `∇ log p(x_t | x_0) = -(x_t - α_t x_0) / σ_t²`.
    pub fn target_score(&self, x_t: &Tensor, x0: &Tensor, t: &[f64]) -> Result<Tensor> {
        if !self.is_diffusion() {
            return Err(self.unsupported("a conditional score"));
        }
        check_rows("target_score", x_t, x0, t)?;
        let cols = x0.cols();
        let coeffs = t
            .iter()
            .map(|&ti| {
                let (a, s) = self.alpha_sigma(ti)?;
                if s < SIGMA_FLOOR {
                    Err(Error::NumericDomain(format!("sigma_t = {s:.3e} below floor at t = {ti}")))
                } else {
                    Ok((a, s))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let data = x_t
            .data()
            .iter()
            .zip(x0.data())
            .enumerate()
            .map(|(i, (&xt, &x0))| {
                let (a, s) = coeffs[i / cols];
                -(xt - a * x0) / (s * s)
            })
            .collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }

    /// Conditional velocity: `α'_t x_0 + σ'_t ε` for diffusion kinds and
    /// `x_1 - x_0` for I-CFM.
    pub fn target_velocity(&self, x0: &Tensor, x1_or_noise: &Tensor, t: &[f64]) -> Result<Tensor> {
        check_rows("target_velocity", x0, x1_or_noise, t)?;
        if !self.is_diffusion() {
            return x1_or_noise.zip_map(x0, |x1, x0| x1 - x0);
        }
        let cols = x0.cols();
        let coeffs = t.iter().map(|&ti| self.alpha_sigma_dt(ti)).collect::<Result<Vec<_>>>()?;
        let data = x0
            .data()
            .iter()
            .zip(x1_or_noise.data())
            .enumerate()
            .map(|(i, (&x0, &eps))| {
                let (da, ds) = coeffs[i / cols];
                da * x0 + ds * eps
            })
            .collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    /// Coefficients `(a, b)` with `out = a x_t + b value` converting a
    /// network output between parameterizations at time `t`.
    pub fn conversion(&self, from: Parameterization, to: Parameterization, t: f64) -> Result<(f64, f64)> {
        use Parameterization::*;
        if from == to {
            return Ok((0.0, 1.0));
        }
        if !self.is_diffusion() {
            return Err(self.unsupported(&format!("{from:?} -> {to:?} conversion")));
        }
        let (f, g2) = self.drift_diffusion(t)?;
        let (_, sigma) = self.alpha_sigma(clip(t))?;
        if sigma < SIGMA_FLOOR {
            return Err(Error::NumericDomain(format!("sigma_t = {sigma:.3e} below floor")));
        }
        // Score is the pivot: v = f x - g²/2 s, ε = -σ s.
        let to_score = match from {
            Score => (0.0, 1.0),
            Noise => (0.0, -1.0 / sigma),
            Velocity => (2.0 * f / g2, -2.0 / g2),
        };
        let (a, b) = to_score;
        Ok(match to {
            Score => (a, b),
            Noise => (-sigma * a, -sigma * b),
            Velocity => (f - 0.5 * g2 * a, -0.5 * g2 * b),
        })
    }

    /// Converts `value` (rows aligned with `x_t` and `t`) between
    /// parameterizations.
    pub fn convert(
        &self,
        from: Parameterization,
        to: Parameterization,
        x_t: &Tensor,
        t: &[f64],
        value: &Tensor,
    ) -> Result<Tensor> {
        check_rows("convert", x_t, value, t)?;
        let cols = x_t.cols();
        let coeffs = t.iter().map(|&ti| self.conversion(from, to, ti)).collect::<Result<Vec<_>>>()?;
        let data = x_t
            .data()
            .iter()
            .zip(value.data())
            .enumerate()
            .map(|(i, (&x, &v))| {
                let (a, b) = coeffs[i / cols];
                a * x + b * v
            })
            .collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }
}

pub fn clip(t: f64) -> f64 {
    t.clamp(T_EPS, 1.0 - T_EPS)
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")))
    }
}

fn check_rows(op: &'static str, a: &Tensor, b: &Tensor, t: &[f64]) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() != t.len() {
        return Err(Error::shape(op, format!("{} rows but {} times", a.rows(), t.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use Parameterization::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    fn interior_grid() -> Vec<f64> {
        (0..=100).map(|k| T_EPS + k as f64 * (1.0 - 2.0 * T_EPS) / 100.0).collect()
    }

    #[test]
    fn gvp_alpha_sigma_values() {
        assert_eq!(PathSchedule::Gvp.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        let (a, s) = PathSchedule::Gvp.alpha_sigma(0.5).unwrap();
        assert_relative_eq!(a, 0.7071068, epsilon = 1e-7);
        assert_relative_eq!(s, 0.7071068, epsilon = 1e-7);
    }

    #[test]
    fn vpsde_alpha_at_one() {
        let (a, _) = PathSchedule::vp_sde().alpha_sigma(1.0).unwrap();
        assert_relative_eq!(a, (-5.025f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(a, 6.5716e-3, max_relative = 1e-4);
    }

    #[test]
    fn icfm_has_no_alpha_sigma() {
        assert!(matches!(PathSchedule::icfm().alpha_sigma(0.5), Err(Error::Unsupported(_))));
        assert!(matches!(PathSchedule::icfm().drift_diffusion(0.5), Err(Error::Unsupported(_))));
    }

    #[test]
    fn gvp_drift_diffusion_midpoint() {
        let (f, g2) = PathSchedule::Gvp.drift_diffusion(0.5).unwrap();
        assert_relative_eq!(f, -std::f64::consts::FRAC_PI_2, max_relative = 1e-12);
        assert_relative_eq!(g2, std::f64::consts::PI, max_relative = 1e-12);
    }

    #[test]
    fn vpsde_drift_diffusion_is_beta() {
        let s = PathSchedule::vp_sde();
        for t in [0.1, 0.4, 0.9] {
            let beta = 0.1 + t * 19.9;
            let (f, g2) = s.drift_diffusion(t).unwrap();
            assert_relative_eq!(f, -beta / 2.0, max_relative = 1e-12);
            assert_relative_eq!(g2, beta, max_relative = 1e-12);
        }
    }

    #[test]
    fn gvp_near_zero_is_small() {
        let (f, g2) = PathSchedule::Gvp.drift_diffusion(0.0).unwrap();
        assert!(f < 0.0 && f.abs() < 2.5e-3 && g2 > 0.0 && g2 < 5e-3, "{f} {g2}");
        assert_eq!(PathSchedule::Gvp.drift_diffusion(1e-9).unwrap(), (f, g2));
    }

    #[test]
    fn gvp_unit_norm_everywhere() {
        for k in 0..=1000 {
            let (a, s) = PathSchedule::Gvp.alpha_sigma(k as f64 / 1000.0).unwrap();
            assert!((a * a + s * s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_diffusion_matches_finite_differences() {
        let h = 1e-6;
        for s in [PathSchedule::vp_sde(), PathSchedule::Gvp] {
            for t in interior_grid() {
                let (a, sig) = s.alpha_sigma(t).unwrap();
                let (ap, sp) = s.alpha_sigma(t + h).unwrap();
                let (am, sm) = s.alpha_sigma(t - h).unwrap();
                let da = (ap - am) / (2.0 * h);
                let dsig2 = (sp * sp - sm * sm) / (2.0 * h);
                let (f, g2) = s.drift_diffusion(t).unwrap();
                assert_relative_eq!(f * a, da, max_relative = 1e-4);
                assert_relative_eq!(g2, dsig2 - 2.0 * f * sig * sig, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn sigma_strictly_increasing() {
        for s in [PathSchedule::vp_sde(), PathSchedule::Gvp] {
            let mut prev = -1.0;
            for t in interior_grid() {
                let (_, sig) = s.alpha_sigma(t).unwrap();
                assert!(sig > prev);
                prev = sig;
            }
        }
    }

    #[test]
    fn path_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = row(&[1.0, 0.0]);
        let eps = row(&[0.0, 1.0]);
        let p = PathSchedule::Gvp.sample_path_point(&x0, &eps, &[0.0], &mut rng).unwrap();
        assert_eq!(p.x_t, x0);
        let p = PathSchedule::Gvp.sample_path_point(&x0, &eps, &[0.5], &mut rng).unwrap();
        assert_relative_eq!(p.x_t.data()[0], 0.70710678, epsilon = 1e-6);
        assert_relative_eq!(p.x_t.data()[1], 0.70710678, epsilon = 1e-6);
        let p = PathSchedule::icfm()
            .sample_path_point(&row(&[0.0, 0.0]), &row(&[2.0, 4.0]), &[0.5], &mut rng)
            .unwrap();
        assert_eq!(p.x_t.data(), &[1.0, 2.0]);
        assert!(PathSchedule::Gvp.sample_path_point(&x0, &row(&[1.0]), &[0.5], &mut rng).is_err());
    }

    #[test]
    fn conditional_scores() {
        let s = PathSchedule::Gvp;
        let x0 = row(&[0.3, -1.0]);
        let (a, _) = s.alpha_sigma(0.5).unwrap();
        let mean = x0.map(|v| a * v);
        assert_eq!(s.target_score(&mean, &x0, &[0.5]).unwrap().data(), &[0.0, 0.0]);

        let eps = row(&[1.0, 0.0]);
        let xt = s.sample_path_point(&x0, &eps, &[0.5], &mut ChaCha8Rng::seed_from_u64(0)).unwrap().x_t;
        let sc = s.target_score(&xt, &x0, &[0.5]).unwrap();
        assert_relative_eq!(sc.data()[0], -1.41421, epsilon = 1e-5);
        assert_relative_eq!(sc.data()[1], 0.0, epsilon = 1e-12);

        let eps2 = row(&[2.0, 0.0]);
        let xt2 = s.sample_path_point(&x0, &eps2, &[0.5], &mut ChaCha8Rng::seed_from_u64(0)).unwrap().x_t;
        let sc2 = s.target_score(&xt2, &x0, &[0.5]).unwrap();
        assert_relative_eq!(sc2.data()[0], 2.0 * sc.data()[0], max_relative = 1e-12);

        assert!(matches!(s.target_score(&x0, &x0, &[1e-5]), Err(Error::NumericDomain(_))));
        assert!(PathSchedule::icfm().target_score(&x0, &x0, &[0.5]).is_err());
    }

    #[test]
    fn conditional_velocities() {
        let v = PathSchedule::icfm().target_velocity(&row(&[0.0, 0.0]), &row(&[2.0, 4.0]), &[0.3]).unwrap();
        assert_eq!(v.data(), &[2.0, 4.0]);
        let v = PathSchedule::Gvp.target_velocity(&row(&[1.0, 0.0]), &row(&[0.0, 1.0]), &[0.5]).unwrap();
        assert_relative_eq!(v.data()[0], -1.1107207, epsilon = 1e-6);
        assert_relative_eq!(v.data()[1], 1.1107207, epsilon = 1e-6);
        // α'(0) = 0 for GVP, so a zero-noise path is stationary there.
        let v = PathSchedule::Gvp.target_velocity(&row(&[1.0, -3.0]), &row(&[0.0, 0.0]), &[0.0]).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0]);
    }

    #[test]
    fn conversions() {
        let s = PathSchedule::Gvp;
        let xt = row(&[1.0, 0.0]);
        let zero = row(&[0.0, 0.0]);
        let v = s.convert(Score, Velocity, &xt, &[0.5], &zero).unwrap();
        let (f, _) = s.drift_diffusion(0.5).unwrap();
        assert_relative_eq!(v.data()[0], f, max_relative = 1e-12);

        let eps = row(&[0.0, 1.0]);
        let v = s.convert(Noise, Velocity, &xt, &[0.5], &eps).unwrap();
        assert_relative_eq!(v.data()[0], -1.5708, epsilon = 1e-4);
        // score = -ε/σ, so the noise term enters as +g²/(2σ)·ε.
        assert_relative_eq!(v.data()[1], 2.2214, epsilon = 1e-4);

        let sc = s.convert(Noise, Score, &xt, &[0.5], &eps).unwrap();
        let v2 = s.convert(Score, Velocity, &xt, &[0.5], &sc).unwrap();
        assert!(v2.max_abs_diff(&v) <= 1e-10 * 3.0);
        assert!(PathSchedule::icfm().convert(Score, Velocity, &xt, &[0.5], &eps).is_err());
    }

    #[test]
    fn velocity_identity_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in [PathSchedule::vp_sde(), PathSchedule::Gvp] {
            for t in interior_grid() {
                let x0 = Tensor::randn(&[1, 3], &mut rng);
                let eps = Tensor::randn(&[1, 3], &mut rng);
                let xt = s.sample_path_point(&x0, &eps, &[t], &mut rng).unwrap().x_t;
                let direct = s.target_velocity(&x0, &eps, &[t]).unwrap();
                let via = s.convert(Score, Velocity, &xt, &[t], &s.target_score(&xt, &x0, &[t]).unwrap()).unwrap();
                for (a, b) in direct.data().iter().zip(via.data()) {
                    assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "t={t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn conversion_cycles_are_identity() {
        let s = PathSchedule::vp_sde();
        let xt = row(&[0.4, -0.7]);
        let val = row(&[1.3, 0.2]);
        for t in [0.05, 0.5, 0.95] {
            for (a, b, c) in [(Score, Noise, Velocity), (Velocity, Score, Noise), (Noise, Velocity, Score)] {
                let x1 = s.convert(a, b, &xt, &[t], &val).unwrap();
                let x2 = s.convert(b, c, &xt, &[t], &x1).unwrap();
                let back = s.convert(c, a, &xt, &[t], &x2).unwrap();
                assert!(back.max_abs_diff(&val) < 1e-10, "{a:?}->{b:?}->{c:?} at {t}");
            }
        }
    }
}
