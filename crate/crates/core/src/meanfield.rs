//! Entropy shares, mean-field estimators and the adaptive learning rate.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{ClientPartition, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{self, Batch, ModelSpec};
use crate::numerics::{dot, l2norm, streams, ParamVector, RngStream};

/// Floor applied to the second estimator before it is used as a divisor.
pub const PHI2_FLOOR: f64 = 1e-30;
/// Default convergence threshold for both estimators.
pub const DEFAULT_EPS: f64 = 1e-3;

const MAGIC: &[u8; 4] = b"MFT1";
/// Grid used to locate the smallest root when the iteration alone is not
/// enough.
const SCAN_POINTS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyShares {
    pub p: Vec<f64>,
}

/// `p_i = theta_i ||w_i||^2 / denominator`, where the denominator is `phi2`
/// when given and the weighted squared-norm sum otherwise.
pub fn entropy_shares(
    local_params: &[ParamVector],
    theta: &[f64],
    phi2: Option<f64>,
) -> Result<EntropyShares> {
    if local_params.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            left: local_params.len(),
            right: theta.len(),
        });
    }
    let weighted: Vec<f64> = local_params
        .iter()
        .zip(theta)
        .map(|(w, t)| t * w.squared_norm())
        .collect();
    let denom = phi2.unwrap_or_else(|| weighted.iter().sum());
    if !(denom >= PHI2_FLOOR) {
        return Err(Error::DegenerateMass(denom));
    }
    Ok(EntropyShares {
        p: weighted.iter().map(|v| (v / denom).clamp(0.0, 1.0)).collect(),
    })
}

/// `sum p ln p` with `0 ln 0 = 0`.
pub fn system_entropy(shares: &EntropyShares) -> f64 {
    shares
        .p
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateSolveConfig {
    pub beta: f64,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub damping: f64,
}

impl Default for RateSolveConfig {
    fn default() -> Self {
        RateSolveConfig {
            beta: 0.99,
            inner_tol: 1e-8,
            inner_max_iters: 100,
            damping: 0.5,
        }
    }
}

impl RateSolveConfig {
    pub fn with_beta(beta: f64) -> Self {
        RateSolveConfig {
            beta,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid("beta must lie strictly inside (0, 1)"));
        }
        if !(self.inner_tol > 0.0) || self.inner_max_iters == 0 {
            return Err(Error::invalid("inner_tol and inner_max_iters must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid("damping must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// `2 beta theta D ||phi1|| / ((1 - beta) phi2)`.
pub fn lr_upper_bound(theta_i: f64, beta: f64, d: f64, phi1_norm: f64, phi2_next: f64) -> f64 {
    let v = 2.0 * beta * theta_i * d * phi1_norm / ((1.0 - beta) * phi2_next);
    if v.is_finite() {
        v.max(0.0)
    } else {
        0.0
    }
}

/// The implicit rate equation reduced to scalars.
///
/// With `a = phi1.g`, `b = |g|^2` and `n = |phi1|^2` the candidate local
/// parameter `phi1 - eta g` has squared norm `n - 2 eta a + eta^2 b`, so the
/// whole equation is a function of eta alone.
#[derive(Debug, Clone, Copy)]
pub struct RateEquation {
    pub theta: f64,
    pub a: f64,
    pub b: f64,
    pub n: f64,
    pub phi2_next: f64,
    /// `beta theta / ((1 - beta) phi2)`
    pub k: f64,
}

impl RateEquation {
    pub fn new(
        theta_i: f64,
        grad: &ParamVector,
        phi1_t: &ParamVector,
        phi2_next: f64,
        beta: f64,
    ) -> Result<Self> {
        let a = dot(phi1_t, grad)?;
        let phi2_next = phi2_next.max(PHI2_FLOOR);
        Ok(RateEquation {
            theta: theta_i,
            a,
            b: grad.squared_norm(),
            n: phi1_t.squared_norm(),
            phi2_next,
            k: beta * theta_i / ((1.0 - beta) * phi2_next),
        })
    }

    /// `1 + ln p(eta)`.
    pub fn log_term(&self, eta: f64) -> f64 {
        let sq = (self.n - 2.0 * eta * self.a + eta * eta * self.b).max(0.0);
        let p = (self.theta * sq / self.phi2_next).max(f64::MIN_POSITIVE);
        1.0 + p.ln()
    }

    /// Right-hand side of the rate equation.
    pub fn rhs(&self, eta: f64) -> f64 {
        let lin = self.a - eta * self.b;
        if lin == 0.0 {
            return 0.0;
        }
        self.k * lin * self.log_term(eta)
    }

    /// `eta - max(0, rhs(eta))`; zero exactly at solutions of the
    /// non-negative rate equation.
    pub fn residual(&self, eta: f64) -> f64 {
        eta - self.rhs(eta).max(0.0)
    }

    /// One step of the closed-form rearrangement `eta = k a L / (1 + k b L)`
    /// with the log term frozen at `eta`.
    fn step(&self, eta: f64) -> f64 {
        let c = self.k * self.log_term(eta);
        if c == 0.0 {
            return 0.0;
        }
        let denom = 1.0 / c + self.b;
        let v = self.a / denom;
        if v.is_finite() {
            v.max(0.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSolution {
    pub eta: f64,
    pub bound: f64,
    pub iterations: usize,
    /// False when neither the iteration nor the bracketing search produced a
    /// root and the result is the clamped last iterate.
    pub converged: bool,
}

/// Solves the implicit adaptive-rate equation for one client.
///
/// The damped iteration runs from `eta_init`. When it settles on a positive
/// root, the interval below it is scanned so the smallest non-negative root is
/// returned regardless of the starting point. When it fails, the whole
/// admissible interval is scanned and the first sign change is bisected. The
/// result always lies in `[0, bound]` with `bound` taken at `D = |g|`.
pub fn solve_learning_rate_detailed(
    theta_i: f64,
    grad: &ParamVector,
    phi1_t: &ParamVector,
    phi2_next: f64,
    cfg: &RateSolveConfig,
    eta_init: f64,
) -> Result<RateSolution> {
    cfg.validate()?;
    if phi1_t.len() != grad.len() {
        return Err(Error::DimensionMismatch {
            left: phi1_t.len(),
            right: grad.len(),
        });
    }
    let eq = RateEquation::new(theta_i, grad, phi1_t, phi2_next, cfg.beta)?;
    let bound = lr_upper_bound(
        theta_i,
        cfg.beta,
        l2norm(grad),
        eq.n.sqrt(),
        eq.phi2_next,
    );
    let done = |eta: f64, iterations, converged| RateSolution {
        eta: eta.clamp(0.0, bound),
        bound,
        iterations,
        converged,
    };
    if eq.b == 0.0 || bound == 0.0 || eq.rhs(0.0) <= 0.0 {
        return Ok(done(0.0, 0, true));
    }

    let mut eta = eta_init.clamp(0.0, bound);
    let mut iterations = 0;
    let mut settled = false;
    while iterations < cfg.inner_max_iters {
        iterations += 1;
        let next = (1.0 - cfg.damping) * eta + cfg.damping * eq.step(eta);
        let delta = (next - eta).abs();
        eta = next;
        if delta <= cfg.inner_tol * (1.0 + eta) {
            settled = true;
            break;
        }
    }
    let tol = 1e-9 * (1.0 + bound);
    let iterate_is_root = settled && eta <= bound && eq.residual(eta).abs() <= tol;
    let hi = if iterate_is_root { eta } else { bound };
    match first_root(&eq, hi) {
        Some(root) => Ok(done(root, iterations, true)),
        None if iterate_is_root => Ok(done(eta, iterations, true)),
        None => {
            if !settled {
                warn!("rate iteration did not settle within {} steps", cfg.inner_max_iters);
            }
            // residual negative everywhere: the equation asks for more than the bound
            let fallback = if eq.residual(bound) < 0.0 { bound } else { eta };
            Ok(done(fallback, iterations, false))
        }
    }
}

/// Smallest root of the residual in `(0, hi]`, located on a uniform grid and
/// refined by bisection. The residual is negative at zero.
fn first_root(eq: &RateEquation, hi: f64) -> Option<f64> {
    let mut lo_x = 0.0;
    for k in 1..=SCAN_POINTS {
        let x = hi * k as f64 / SCAN_POINTS as f64;
        let r = eq.residual(x);
        if r >= 0.0 {
            if r == 0.0 {
                return Some(x);
            }
            let (mut lo, mut up) = (lo_x, x);
            for _ in 0..200 {
                let mid = 0.5 * (lo + up);
                if mid <= lo || mid >= up {
                    break;
                }
                if eq.residual(mid) < 0.0 {
                    lo = mid;
                } else {
                    up = mid;
                }
            }
            return Some(0.5 * (lo + up));
        }
        lo_x = x;
    }
    None
}

pub fn solve_learning_rate(
    theta_i: f64,
    grad: &ParamVector,
    phi1_t: &ParamVector,
    phi2_next: f64,
    cfg: &RateSolveConfig,
    eta_init: f64,
) -> Result<f64> {
    solve_learning_rate_detailed(theta_i, grad, phi1_t, phi2_next, cfg, eta_init).map(|s| s.eta)
}

/// `gamma eta_prev + (1 - gamma) eta_new`.
pub fn decay_lr(eta_prev: f64, eta_new: f64, gamma: f64) -> f64 {
    gamma * eta_prev + (1.0 - gamma) * eta_new
}

/// Gradient oracle for the single-step mean-field dynamics.
pub trait MeanFieldDynamics {
    fn num_clients(&self) -> usize;
    fn theta(&self, client: usize) -> f64;
    /// Gradient of client `client`'s loss at round `t`, evaluated at `w`.
    fn gradient(&self, client: usize, t: usize, w: &ParamVector) -> Result<ParamVector>;
}

/// Model losses on one fixed, seeded mini-batch per client and round.
pub struct ModelDynamics<'a> {
    spec: &'a ModelSpec,
    theta: Vec<f64>,
    full: Vec<Batch>,
    /// `None` when the batch is the whole client dataset.
    batches: Vec<Vec<Option<Batch>>>,
}

impl<'a> ModelDynamics<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        dataset: &LabeledDataset,
        partitions: &[ClientPartition],
        horizon: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let root = RngStream::new(seed, streams::FIXED_POINT_BATCHES);
        let mut full = Vec::with_capacity(partitions.len());
        let mut batches = Vec::with_capacity(partitions.len());
        for part in partitions {
            let client = dataset.examples.select(&part.indices)?;
            let mut rng = root.derive(part.client_id as u64);
            let per_t = (0..horizon)
                .map(|_| {
                    if batch_size >= client.len() {
                        Ok(None)
                    } else {
                        let idx = rng.sample_without_replacement(client.len(), batch_size);
                        client.select(&idx).map(Some)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            full.push(client);
            batches.push(per_t);
        }
        Ok(ModelDynamics {
            spec,
            theta: partitions.iter().map(|p| p.theta).collect(),
            full,
            batches,
        })
    }
}

impl MeanFieldDynamics for ModelDynamics<'_> {
    fn num_clients(&self) -> usize {
        self.theta.len()
    }

    fn theta(&self, client: usize) -> f64 {
        self.theta[client]
    }

    fn gradient(&self, client: usize, t: usize, w: &ParamVector) -> Result<ParamVector> {
        let batch = self.batches[client][t].as_ref().unwrap_or(&self.full[client]);
        models::gradient(self.spec, w, batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrajectoryWarnings {
    pub phi2_floored: bool,
    pub inner_unconverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldTrajectory {
    /// `phi1[t]` for `t = 0..=T`.
    pub phi1: Vec<ParamVector>,
    pub phi2: Vec<f64>,
    /// `eta[i][t]` for `t = 0..T`; the terminal rate is zero and not stored.
    pub eta: Vec<Vec<f64>>,
    pub beta: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub final_gap: (f64, f64),
    pub warnings: TrajectoryWarnings,
}

impl MeanFieldTrajectory {
    pub fn horizon(&self) -> usize {
        self.phi1.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.phi1[0].len()
    }

    pub fn num_clients(&self) -> usize {
        self.eta.len()
    }

    /// Rate of client `i` at round `t`; zero from the horizon on.
    pub fn eta_at(&self, i: usize, t: usize) -> f64 {
        self.eta[i].get(t).copied().unwrap_or(0.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (d, n, t) = (self.dim(), self.num_clients(), self.horizon());
        let mut out = Vec::with_capacity(24 + 8 * ((t + 1) * (d + 1) + n * t));
        out.extend_from_slice(MAGIC);
        for v in [d, n, t, self.outer_iterations, usize::from(self.converged)] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for phi in &self.phi1 {
            for x in phi.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for x in &self.phi2 {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for row in &self.eta {
            for x in row {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a trajectory. `beta` is not part of the file layout and must
    /// come from the experiment configuration.
    pub fn from_bytes(bytes: &[u8], beta: f64) -> Result<Self> {
        let bad = |msg: String| Error::TrajectoryFormat(msg);
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(bad("missing MFT1 header".into()));
        }
        let word = |k: usize| {
            let o = 4 + 4 * k;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        };
        let (d, n, t, k, flag) = (word(0), word(1), word(2), word(3), word(4));
        if d == 0 || n == 0 || t == 0 || flag > 1 {
            return Err(bad(format!("invalid header d={d} N={n} T={t} flag={flag}")));
        }
        let count = (t + 1) * d + (t + 1) + n * t;
        let expected = 24 + 8 * count;
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes for d={d} N={n} T={t}, found {}",
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let (phi1_flat, rest) = vals.split_at((t + 1) * d);
        let (phi2, eta_flat) = rest.split_at(t + 1);
        Ok(MeanFieldTrajectory {
            phi1: phi1_flat.chunks(d).map(|c| ParamVector::new(c.to_vec())).collect(),
            phi2: phi2.to_vec(),
            eta: eta_flat.chunks(t).map(<[f64]>::to_vec).collect(),
            beta,
            converged: flag == 1,
            outer_iterations: k,
            final_gap: (f64::NAN, f64::NAN),
            warnings: TrajectoryWarnings::default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, beta: f64) -> Result<Self> {
        MeanFieldTrajectory::from_bytes(&std::fs::read(path)?, beta)
    }
}

/// One sweep of the dynamics: every client steps from `phi1[t]` using the
/// rate solved against `phi2[t + 1]`.
pub struct Sweep {
    pub phi1: Vec<ParamVector>,
    pub phi2: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
    pub inner_unconverged: usize,
    pub phi2_floored: bool,
}

pub fn sweep<M: MeanFieldDynamics + ?Sized>(
    dynamics: &M,
    phi1: &[ParamVector],
    phi2: &[f64],
    eta_prev: &[Vec<f64>],
    cfg: &RateSolveConfig,
    outer: usize,
) -> Result<Sweep> {
    let n = dynamics.num_clients();
    let horizon = phi1.len() - 1;
    let dim = phi1[0].len();
    let mut out = Sweep {
        phi1: vec![phi1[0].clone()],
        phi2: vec![phi2[0]],
        eta: vec![vec![0.0; horizon]; n],
        inner_unconverged: 0,
        phi2_floored: false,
    };
    for t in 0..horizon {
        let mut phi2_next = phi2[t + 1];
        if phi2_next < PHI2_FLOOR {
            phi2_next = PHI2_FLOOR;
            out.phi2_floored = true;
        }
        let mut acc1 = ParamVector::zeros(dim);
        let mut acc2 = 0.0;
        for i in 0..n {
            let theta = dynamics.theta(i);
            let g = dynamics.gradient(i, t, &phi1[t])?;
            let sol = solve_learning_rate_detailed(theta, &g, &phi1[t], phi2_next, cfg, eta_prev[i][t])?;
            if !sol.converged {
                out.inner_unconverged += 1;
            }
            let mut w = phi1[t].clone();
            w.add_scaled(-sol.eta, &g)?;
            if !w.is_finite() {
                return Err(Error::non_finite(format!(
                    "local parameters at outer iteration {outer}, round {t}, client {i}"
                )));
            }
            acc1.add_scaled(theta, &w)?;
            acc2 += theta * w.squared_norm();
            out.eta[i][t] = sol.eta;
        }
        out.phi1.push(acc1);
        out.phi2.push(acc2);
    }
    Ok(out)
}

/// Largest per-coordinate change of `phi1` and absolute change of `phi2`.
pub fn estimator_gaps(
    phi1_a: &[ParamVector],
    phi2_a: &[f64],
    phi1_b: &[ParamVector],
    phi2_b: &[f64],
) -> Result<(f64, f64)> {
    let mut g1: f64 = 0.0;
    for (x, y) in phi1_a.iter().zip(phi1_b) {
        g1 = g1.max(x.max_abs_diff(y)?);
    }
    let g2 = phi2_a
        .iter()
        .zip(phi2_b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok((g1, g2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    pub horizon: usize,
    pub rate: RateSolveConfig,
    pub eps1: f64,
    pub eps2: f64,
    pub max_outer: usize,
}

/// Iterates the mean-field map until both estimators stop moving.
///
/// Every sweep recomputes all rounds from the previous estimates (a Jacobi
/// update), starting from constant estimators at `w0`.
pub fn fixed_point<M: MeanFieldDynamics + ?Sized>(
    dynamics: &M,
    w0: &ParamVector,
    cfg: &FixedPointConfig,
) -> Result<MeanFieldTrajectory> {
    cfg.rate.validate()?;
    if cfg.horizon == 0 {
        return Err(Error::invalid("horizon T must be at least 1"));
    }
    if !(cfg.eps1 > 0.0 && cfg.eps2 > 0.0) || cfg.max_outer == 0 {
        return Err(Error::invalid("eps1, eps2 and max_outer must be positive"));
    }
    let n = dynamics.num_clients();
    let mut phi1 = vec![w0.clone(); cfg.horizon + 1];
    let mut phi2 = vec![w0.squared_norm(); cfg.horizon + 1];
    let mut eta = vec![vec![0.0; cfg.horizon]; n];
    let mut warnings = TrajectoryWarnings::default();
    let mut gap = (f64::INFINITY, f64::INFINITY);
    let mut converged = false;
    let mut k = 0;
    while k < cfg.max_outer {
        k += 1;
        let next = sweep(dynamics, &phi1, &phi2, &eta, &cfg.rate, k)?;
        gap = estimator_gaps(&next.phi1, &next.phi2, &phi1, &phi2)?;
        warnings.inner_unconverged = next.inner_unconverged;
        warnings.phi2_floored |= next.phi2_floored;
        phi1 = next.phi1;
        phi2 = next.phi2;
        eta = next.eta;
        if gap.0 < cfg.eps1 && gap.1 < cfg.eps2 {
            converged = true;
            break;
        }
    }
    if warnings.phi2_floored {
        warn!("phi2 fell below {PHI2_FLOOR:e} and was floored");
    }
    if !converged {
        warn!("fixed point not reached after {k} outer iterations, gaps {gap:?}");
    }
    Ok(MeanFieldTrajectory {
        phi1,
        phi2,
        eta,
        beta: cfg.rate.beta,
        converged,
        outer_iterations: k,
        final_gap: gap,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn share_examples() {
        let s = entropy_shares(&[pv(&[3.0, 4.0])], &[1.0], None).unwrap();
        assert_eq!(s.p, vec![1.0]);
        let w = pv(&[1.0, 1.0]);
        let s = entropy_shares(&[w.clone(), w.clone()], &[0.25, 0.75], None).unwrap();
        assert!((s.p[0] - 0.25).abs() < 1e-15 && (s.p[1] - 0.75).abs() < 1e-15);
        let s = entropy_shares(&[w.clone(), w], &[0.5, 0.5], Some(4.0)).unwrap();
        assert_eq!(s.p, vec![0.25, 0.25]);
    }

    #[test]
    fn degenerate_mass_is_an_error() {
        let z = ParamVector::zeros(3);
        let err = entropy_shares(&[z.clone(), z], &[0.5, 0.5], None).unwrap_err();
        assert!(err.to_string().contains("degenerate parameter mass"));
    }

    #[test]
    fn entropy_examples() {
        let one_hot = EntropyShares { p: vec![0.0, 1.0, 0.0] };
        assert_eq!(system_entropy(&one_hot), 0.0);
        let p = EntropyShares { p: vec![0.25, 0.75] };
        let expect = 0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln();
        assert!((system_entropy(&p) - expect).abs() < 1e-15);
        assert!((system_entropy(&p) + 0.562335).abs() < 1e-6);
    }

    #[test]
    fn bound_examples() {
        assert!((lr_upper_bound(0.1, 0.5, 2.0, 1.0, 4.0) - 0.1).abs() < 1e-15);
        assert_eq!(lr_upper_bound(0.1, 0.0, 2.0, 1.0, 4.0), 0.0);
        assert_eq!(lr_upper_bound(0.1, 0.5, 0.0, 1.0, 4.0), 0.0);
    }

    #[test]
    fn decay_examples() {
        assert_eq!(decay_lr(0.01, 0.03, 0.0), 0.03);
        assert_eq!(decay_lr(0.01, 0.03, 1.0), 0.01);
        assert!((decay_lr(0.01, 0.03, 0.99) - 0.0102).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_gives_zero_rate() {
        let cfg = RateSolveConfig::with_beta(0.9);
        let eta = solve_learning_rate(0.5, &pv(&[0.0, 0.0]), &pv(&[1.0, 2.0]), 5.0, &cfg, 0.3);
        assert_eq!(eta.unwrap(), 0.0);
    }

    #[test]
    fn vanishing_beta_gives_vanishing_rate() {
        let cfg = RateSolveConfig::with_beta(1e-12);
        let eta = solve_learning_rate(0.5, &pv(&[-1.0, 0.5]), &pv(&[1.0, 2.0]), 5.0, &cfg, 0.0);
        assert!(eta.unwrap() <= 1e-6);
    }

    #[test]
    fn aligned_gradient_with_negative_log_term_gives_zero() {
        // p(0) = 0.2 * 5 / 5 so 1 + ln p < 0, and phi1.g > 0
        let cfg = RateSolveConfig::with_beta(0.5);
        let eta = solve_learning_rate(0.2, &pv(&[0.1, 0.1]), &pv(&[1.0, 2.0]), 5.0, &cfg, 0.0);
        assert_eq!(eta.unwrap(), 0.0);
    }

    /// Brute-force residual minimisation over a uniform grid.
    fn grid_oracle(eq: &RateEquation, bound: f64, points: usize) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=points {
            let x = bound * k as f64 / points as f64;
            let r = eq.residual(x).abs();
            if r < best.0 {
                best = (r, x);
            }
        }
        best.1
    }

    #[test]
    fn two_parameter_toy_matches_grid_oracle() {
        let cfg = RateSolveConfig::with_beta(0.9);
        let (phi1, g) = (pv(&[1.0, -0.5]), pv(&[-0.8, 0.3]));
        let sol = solve_learning_rate_detailed(0.1, &g, &phi1, 1.2, &cfg, 0.0).unwrap();
        let eq = RateEquation::new(0.1, &g, &phi1, 1.2, 0.9).unwrap();
        let oracle = grid_oracle(&eq, sol.bound, 1_000_000);
        assert!(sol.eta > 0.0);
        assert!((sol.eta - oracle).abs() <= 1e-5, "{} vs {oracle}", sol.eta);
        assert!(eq.residual(sol.eta).abs() < 1e-9);
    }

    #[test]
    fn starting_point_does_not_change_the_root() {
        let cfg = RateSolveConfig::with_beta(0.9);
        let (phi1, g) = (pv(&[1.0, -0.5]), pv(&[-0.8, 0.3]));
        let a = solve_learning_rate(0.1, &g, &phi1, 1.2, &cfg, 0.0).unwrap();
        let b = solve_learning_rate(0.1, &g, &phi1, 1.2, &cfg, 1e3).unwrap();
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-12);
    }

    struct Flat {
        theta: Vec<f64>,
        dim: usize,
    }

    impl MeanFieldDynamics for Flat {
        fn num_clients(&self) -> usize {
            self.theta.len()
        }
        fn theta(&self, i: usize) -> f64 {
            self.theta[i]
        }
        fn gradient(&self, _: usize, _: usize, _: &ParamVector) -> Result<ParamVector> {
            Ok(ParamVector::zeros(self.dim))
        }
    }

    /// Quadratic pull towards a client-specific target.
    struct Pull {
        theta: Vec<f64>,
        targets: Vec<ParamVector>,
    }

    impl MeanFieldDynamics for Pull {
        fn num_clients(&self) -> usize {
            self.theta.len()
        }
        fn theta(&self, i: usize) -> f64 {
            self.theta[i]
        }
        fn gradient(&self, i: usize, _: usize, w: &ParamVector) -> Result<ParamVector> {
            w.sub(&self.targets[i])
        }
    }

    fn fp_config(horizon: usize) -> FixedPointConfig {
        FixedPointConfig {
            horizon,
            rate: RateSolveConfig::with_beta(0.9),
            eps1: DEFAULT_EPS,
            eps2: DEFAULT_EPS,
            max_outer: 200,
        }
    }

    #[test]
    fn flat_loss_is_a_fixed_point_immediately() {
        let dynamics = Flat {
            theta: vec![0.3, 0.7],
            dim: 3,
        };
        let w0 = pv(&[1.0, -2.0, 0.5]);
        let traj = fixed_point(&dynamics, &w0, &fp_config(5)).unwrap();
        assert!(traj.converged);
        assert_eq!(traj.outer_iterations, 1);
        assert!(traj.phi1.iter().all(|p| *p == w0));
        assert!(traj.eta.iter().flatten().all(|&e| e == 0.0));
    }

    #[test]
    fn single_client_matches_direct_replay() {
        let dynamics = Pull {
            theta: vec![1.0],
            targets: vec![pv(&[3.0, -1.0])],
        };
        let w0 = pv(&[1.0, 1.0]);
        let cfg = fp_config(6);
        let traj = fixed_point(&dynamics, &w0, &cfg).unwrap();
        assert!(traj.converged);

        // with one client the estimators are the client's own iterates
        let mut w = w0.clone();
        for t in 0..6 {
            let g = dynamics.gradient(0, t, &w).unwrap();
            let eta = solve_learning_rate(1.0, &g, &w, traj.phi2[t + 1], &cfg.rate, 0.0).unwrap();
            w.add_scaled(-eta, &g).unwrap();
            assert!(w.max_abs_diff(&traj.phi1[t + 1]).unwrap() < cfg.eps1);
        }
    }

    #[test]
    fn converged_trajectory_is_self_consistent() {
        let dynamics = Pull {
            theta: vec![0.2, 0.3, 0.5],
            targets: vec![pv(&[2.0, 0.0]), pv(&[-1.0, 1.0]), pv(&[0.5, -3.0])],
        };
        let w0 = pv(&[1.0, 1.0]);
        let cfg = fp_config(8);
        let traj = fixed_point(&dynamics, &w0, &cfg).unwrap();
        assert!(traj.converged);
        let replay = sweep(&dynamics, &traj.phi1, &traj.phi2, &traj.eta, &cfg.rate, 0).unwrap();
        let (g1, g2) = estimator_gaps(&replay.phi1, &replay.phi2, &traj.phi1, &traj.phi2).unwrap();
        assert!(g1 < cfg.eps1 && g2 < cfg.eps2);
    }

    #[test]
    fn trajectory_file_round_trip() {
        let traj = MeanFieldTrajectory {
            phi1: vec![pv(&[1.0, 2.0]), pv(&[0.5, -0.25]), pv(&[0.0, 1e-300])],
            phi2: vec![5.0, 0.3125, 1.0],
            eta: vec![vec![0.1, 0.2], vec![0.0, 3.5], vec![1e-9, 0.0]],
            beta: 0.99,
            converged: true,
            outer_iterations: 17,
            final_gap: (0.0, 0.0),
            warnings: TrajectoryWarnings::default(),
        };
        let bytes = traj.to_bytes();
        assert_eq!(&bytes[..4], b"MFT1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 24 + 8 * (3 * 2 + 3 + 3 * 2));
        let back = MeanFieldTrajectory::from_bytes(&bytes, 0.99).unwrap();
        assert_eq!(back.phi1, traj.phi1);
        assert_eq!(back.phi2, traj.phi2);
        assert_eq!(back.eta, traj.eta);
        assert_eq!((back.converged, back.outer_iterations), (true, 17));
        assert!(MeanFieldTrajectory::from_bytes(&bytes[..bytes.len() - 1], 0.99).is_err());
        assert!(MeanFieldTrajectory::from_bytes(b"MFT2", 0.99).is_err());
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, d)
    }

    proptest! {
        #[test]
        fn shares_sum_to_one(
            ws in proptest::collection::vec(vec_strategy(3), 1..8),
            raw in proptest::collection::vec(0.01f64..1.0, 8),
        ) {
            let n = ws.len();
            let total: f64 = raw[..n].iter().sum();
            let theta: Vec<f64> = raw[..n].iter().map(|x| x / total).collect();
            let params: Vec<ParamVector> = ws.into_iter().map(ParamVector::new).collect();
            prop_assume!(params.iter().zip(&theta).map(|(w, t)| t * w.squared_norm()).sum::<f64>() > 1e-12);
            let s = entropy_shares(&params, &theta, None).unwrap();
            prop_assert!((s.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let h = system_entropy(&s);
            prop_assert!(h <= 0.0 && h >= -(n as f64).ln() - 1e-12);
        }

        #[test]
        fn equal_norms_give_theta(
            raw in proptest::collection::vec(0.01f64..1.0, 1..8),
            w in vec_strategy(4),
        ) {
            let w = ParamVector::new(w);
            prop_assume!(w.squared_norm() > 1e-6);
            let total: f64 = raw.iter().sum();
            let theta: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let params = vec![w; theta.len()];
            let s = entropy_shares(&params, &theta, None).unwrap();
            for (p, t) in s.p.iter().zip(&theta) {
                prop_assert!((p - t).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_is_permutation_invariant(mut raw in proptest::collection::vec(0.0f64..1.0, 1..10)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 0.0);
            raw.iter_mut().for_each(|x| *x /= total);
            let a = system_entropy(&EntropyShares { p: raw.clone() });
            raw.reverse();
            let b = system_entropy(&EntropyShares { p: raw });
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn rate_respects_bound(
            phi1 in vec_strategy(3),
            g in vec_strategy(3),
            theta in 0.01f64..1.0,
            phi2 in 0.1f64..20.0,
            beta in 0.01f64..0.999,
            init in 0.0f64..10.0,
        ) {
            let (phi1, g) = (ParamVector::new(phi1), ParamVector::new(g));
            let cfg = RateSolveConfig::with_beta(beta);
            let sol = solve_learning_rate_detailed(theta, &g, &phi1, phi2, &cfg, init).unwrap();
            let bound = lr_upper_bound(theta, beta, l2norm(&g), l2norm(&phi1), phi2);
            prop_assert!(sol.eta >= 0.0 && sol.eta <= bound + 1e-12);
        }
    }
}
