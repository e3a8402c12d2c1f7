//! Both KL objectives on a finite action set, where every term is exact.
//! Used to check that each objective differs from its KL by a constant.

use crate::error::{Error, Result};

fn check_dist(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&v| !(v > 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} must be a strictly positive distribution")));
    }
    Ok(())
}

/// `KL(p‖q)`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dist(p, "p")?;
    check_dist(q, "q")?;
    if p.len() != q.len() {
        return Err(Error::shape("kl", format!("{} vs {} outcomes", p.len(), q.len())));
    }
    Ok(p.iter().zip(q).map(|(p, q)| p * (p / q).ln()).sum())
}

/// `π*(a) = μ(a) e^{β(Q(a)−V)} / Z` and `Z`.
pub fn optimal_policy(mu: &[f64], q: &[f64], beta: f64, v: f64) -> Result<(Vec<f64>, f64)> {
    check_dist(mu, "behavior")?;
    if mu.len() != q.len() {
        return Err(Error::shape("optimal_policy", format!("{} probabilities, {} values", mu.len(), q.len())));
    }
    let un: Vec<f64> = mu.iter().zip(q).map(|(m, q)| m * (beta * (q - v)).exp()).collect();
    let z: f64 = un.iter().sum();
    Ok((un.into_iter().map(|u| u / z).collect(), z))
}

/// Weighted negative log-likelihood `E_μ[−e^{β(Q−V)}/Z · log π]`.
pub fn forward_objective(mu: &[f64], q: &[f64], beta: f64, v: f64, pi: &[f64]) -> Result<f64> {
    check_dist(pi, "policy")?;
    let (_, z) = optimal_policy(mu, q, beta, v)?;
    Ok((0..mu.len()).map(|i| -mu[i] * (beta * (q[i] - v)).exp() / z * pi[i].ln()).sum())
}

/// `E_π[−βQ] + KL(π‖μ)`.
pub fn reverse_objective(mu: &[f64], q: &[f64], beta: f64, pi: &[f64]) -> Result<f64> {
    let k = kl(pi, mu)?;
    if q.len() != pi.len() {
        return Err(Error::shape("reverse_objective", format!("{} probabilities, {} values", pi.len(), q.len())));
    }
    Ok(pi.iter().zip(q).map(|(p, q)| -beta * p * q).sum::<f64>() + k)
}
