//! Runtime evaluation of the convergence bounds and client drift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2norm, ParamVector};

/// Slack allowed when a bound is checked.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundName {
    RoundGap,
    Drift,
    LossDecrease,
    RateFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub round: usize,
    pub name: BoundName,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

impl BoundReport {
    pub fn new(round: usize, name: BoundName, lhs: f64, rhs: f64) -> Self {
        BoundReport {
            round,
            name,
            lhs,
            rhs,
            satisfied: lhs <= rhs + BOUND_SLACK,
        }
    }
}

/// `|w - w_i|` for every client.
pub fn drift(global_w: &ParamVector, locals: &[ParamVector]) -> Result<Vec<f64>> {
    locals
        .iter()
        .map(|w| global_w.sub(w).map(|d| l2norm(&d)))
        .collect()
}

fn scale(beta: f64, phi2: f64) -> f64 {
    let v = 2.0 * beta / ((1.0 - beta) * phi2);
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

/// `G = sum_j 2 beta theta_j^2 D^2 |phi1(t-1)| / ((1 - beta) phi2(t))`.
pub fn drift_bound_g(theta: &[f64], beta: f64, d: f64, phi1_prev_norm: f64, phi2_t: f64) -> f64 {
    let s = scale(beta, phi2_t);
    theta
        .iter()
        .map(|t| s * t * t * d * d * phi1_prev_norm)
        .sum()
}

/// `sum_i 2 beta theta_i^2 D |phi1(t)| g_i / ((1 - beta) phi2(t+1))`, with
/// `g_i = D` when per-client gradient norms are not supplied.
pub fn round_gap_bound(
    theta: &[f64],
    beta: f64,
    d: f64,
    phi1_norm: f64,
    phi2_next: f64,
    grad_norms: Option<&[f64]>,
) -> f64 {
    let s = scale(beta, phi2_next);
    theta
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let g = grad_norms.map_or(d, |gs| gs[i]);
            s * t * t * d * phi1_norm * g
        })
        .sum()
}

/// Right side of the loss-decrease bound: `(L / 2) gap^2 - D`.
pub fn loss_decrease_rhs(l: f64, gap_bound: f64, d: f64) -> f64 {
    0.5 * l * gap_bound * gap_bound - d
}

pub fn loss_decrease_check(round: usize, f_t: f64, f_next: f64, bound_rhs: f64) -> BoundReport {
    BoundReport::new(round, BoundName::LossDecrease, f_next - f_t, bound_rhs)
}

/// `1 - (1 + 1/(1 - beta)) 4 L delta D^2 |phi1|^2 / phi2^2`.
pub fn kappa(beta: f64, l: f64, delta: f64, d: f64, phi1_norm: f64, phi2_next: f64) -> f64 {
    let c = (1.0 + 1.0 / (1.0 - beta)) * 4.0 * l * delta * d * d * phi1_norm * phi1_norm;
    if c == 0.0 {
        return 1.0;
    }
    1.0 - c / (phi2_next * phi2_next)
}

/// Smallest `|grad|^2 / (2 (F - F*))` over records strictly above the optimum
/// proxy.
pub fn estimate_pl_delta(history: &[(f64, f64)], f_star: f64) -> Result<f64> {
    history
        .iter()
        .filter(|(f, _)| *f > f_star + 1e-12)
        .map(|(f, g)| g * g / (2.0 * (f - f_star)))
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
        .ok_or(Error::AtOptimum)
}

/// Smallest loss in a history, the usual optimum proxy.
pub fn best_loss(history: &[(f64, f64)]) -> f64 {
    history.iter().map(|r| r.0).fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn drift_examples() {
        let g = pv(&[2.0]);
        assert_eq!(drift(&g, &[pv(&[1.0]), pv(&[3.0])]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(drift(&g, std::slice::from_ref(&g)).unwrap(), vec![0.0]);
        let w = pv(&[1.0, 2.0, 2.0]);
        let d = drift(&ParamVector::zeros(3), &[w]).unwrap();
        assert!((d[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn drift_bound_examples() {
        assert!((drift_bound_g(&[0.5, 0.5], 0.5, 1.0, 2.0, 1.0) - 2.0).abs() < 1e-12);
        assert_eq!(drift_bound_g(&[0.5, 0.5], 0.0, 1.0, 2.0, 1.0), 0.0);
        assert_eq!(drift_bound_g(&[0.5, 0.5], 0.5, 0.0, 2.0, 1.0), 0.0);
    }

    #[test]
    fn round_gap_examples() {
        let theta = [0.2, 0.8];
        assert_eq!(round_gap_bound(&theta, 0.9, 3.0, 1.5, 2.0, Some(&[0.0, 0.0])), 0.0);
        let loose = round_gap_bound(&theta, 0.9, 3.0, 1.5, 2.0, None);
        let tight = round_gap_bound(&theta, 0.9, 3.0, 1.5, 2.0, Some(&[3.0, 3.0]));
        assert_eq!(loose, tight);
        // direct evaluation
        let expect: f64 = theta.iter().map(|t| 2.0 * 0.9 * t * t * 3.0 * 1.5 * 1.0 / (0.1 * 2.0)).sum();
        let partial = round_gap_bound(&theta, 0.9, 3.0, 1.5, 2.0, Some(&[1.0, 1.0]));
        assert!((partial - expect).abs() < 1e-12);
    }

    #[test]
    fn kappa_examples() {
        assert!((kappa(0.5, 1.0, 0.1, 1.0, 1.0, 2.0) - 0.7).abs() < 1e-12);
        assert_eq!(kappa(0.5, 1.0, 0.1, 0.0, 1.0, 2.0), 1.0);
        assert_eq!(kappa(0.5, 1.0, 0.0, 1.0, 1.0, 2.0), 1.0);
    }

    #[test]
    fn loss_decrease_examples() {
        let r = loss_decrease_check(3, 1.0, 1.0, 0.5);
        assert!(r.satisfied && r.lhs == 0.0 && r.round == 3);
        assert!(!loss_decrease_check(0, 1.0, 2.0, 0.5).satisfied);
        assert!(loss_decrease_rhs(2.0, 1.0, 0.5).is_finite());
    }

    #[test]
    fn pl_delta_examples() {
        assert_eq!(estimate_pl_delta(&[(1.0, 2.0)], 0.0).unwrap(), 2.0);
        assert_eq!(estimate_pl_delta(&[(1.0, 0.0)], 0.0).unwrap(), 0.0);
        // f = w^2 / 2 has gradient norm |w|
        let quad: Vec<(f64, f64)> = [1.0f64, 2.0, 3.0].iter().map(|w| (0.5 * w * w, *w)).collect();
        assert!((estimate_pl_delta(&quad, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(estimate_pl_delta(&[(0.0, 1.0)], 0.0), Err(Error::AtOptimum)));
    }
}
