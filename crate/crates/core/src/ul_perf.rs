//! Uplink MMSE-receiver SINR: the exact per-draw value and its random-matrix
//! deterministic equivalent, plus rate bookkeeping.
//!
//! Every formula here works with the effective per-thing SNR
//! `rho_u * nu_k * eta_k`, so the power weights `nu` and the normalized SNR
//! are interchangeable.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimation::{ChannelDraw, EstimationStats};
use crate::netgen::RadioConfig;

type C64 = Complex<f64>;

pub const RM_TOL: f64 = 1e-8;
pub const RM_MAX_ITER: usize = 500;

/// Uplink power-control coefficients with rate and power weights.
#[derive(Debug, Clone, PartialEq)]
pub struct UlPowerAllocation {
    pub eta: DVector<f64>,
    pub u: DVector<f64>,
    pub nu: DVector<f64>,
}

impl UlPowerAllocation {
    /// `eta = 1`, `u = 1/sqrt(K)`, `nu = 1`.
    pub fn full_power(k: usize) -> Self {
        UlPowerAllocation {
            eta: DVector::from_element(k, 1.0),
            u: DVector::from_element(k, 1.0 / (k as f64).sqrt()),
            nu: DVector::from_element(k, 1.0),
        }
    }

    /// Given coefficients with default weights.
    pub fn with_eta(eta: DVector<f64>) -> Result<Self> {
        let k = eta.len();
        let mut alloc = Self::full_power(k);
        alloc.eta = eta;
        alloc.validate()?;
        Ok(alloc)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.eta.len();
        if self.u.len() != k || self.nu.len() != k {
            return Err(Error::Argument("eta, u and nu must have equal length".into()));
        }
        if self.eta.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
            return Err(Error::Argument("power coefficients must lie in [0, 1]".into()));
        }
        if self.u.iter().chain(self.nu.iter()).any(|&w| !(w >= 0.0)) {
            return Err(Error::Argument("weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.eta.len()
    }

    /// `rho_u * nu_k * eta_k`.
    pub fn effective_snr(&self, rho_u: f64) -> DVector<f64> {
        self.eta.component_mul(&self.nu) * rho_u
    }
}

/// Diagonal of `D = rho_u sum_k eta_k (B_k - Gamma_k) + I`.
pub fn noise_plus_error_diag(stats: &EstimationStats, alloc: &UlPowerAllocation, rho_u: f64) -> DVector<f64> {
    let p = alloc.effective_snr(rho_u);
    let err = &stats.beta - &stats.gamma;
    let mut d = &err * &p;
    d.add_scalar_mut(1.0);
    d
}

/// `Lambda = sum_k p_k g_hat_k g_hat_k^H + D`.
pub(crate) fn mmse_covariance(g_hat: &DMatrix<C64>, p: &DVector<f64>, d: &DVector<f64>) -> DMatrix<C64> {
    let mut scaled = g_hat.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= C64::from(p[k].sqrt());
    }
    let mut lambda = &scaled * scaled.adjoint();
    for (i, v) in d.iter().enumerate() {
        lambda[(i, i)] += C64::from(*v);
    }
    lambda
}

/// Exact MMSE-receiver SINR of every thing for one channel draw.
///
/// One Cholesky factorization of `Lambda` is shared by all things:
/// `q_k = p_k g_hat_k^H Lambda^{-1} g_hat_k` and `SINR_k = q_k / (1 - q_k)`.
pub fn exact_mmse_sinr(
    draw: &ChannelDraw,
    stats: &EstimationStats,
    alloc: &UlPowerAllocation,
    rho_u: f64,
) -> Result<DVector<f64>> {
    let p = alloc.effective_snr(rho_u);
    let d = noise_plus_error_diag(stats, alloc, rho_u);
    let lambda = mmse_covariance(&draw.g_hat, &p, &d);
    let chol = lambda
        .cholesky()
        .ok_or_else(|| Error::numerical("exact_mmse_sinr", "receiver covariance is not positive definite"))?;
    let x = chol.solve(&draw.g_hat);
    let mut sinr = DVector::zeros(alloc.k());
    for k in 0..alloc.k() {
        if p[k] == 0.0 {
            continue;
        }
        let q = p[k] * draw.g_hat.column(k).dotc(&x.column(k)).re;
        if !(q < 1.0) {
            return Err(Error::numerical("exact_mmse_sinr", format!("q_{k} = {q} is not below 1")));
        }
        let q = q.max(0.0);
        sinr[k] = q / (1.0 - q);
    }
    Ok(sinr)
}

/// Fixed point of the deterministic equivalent. `T` is diagonal and stored
/// as its `M` diagonal entries.
#[derive(Debug, Clone)]
pub struct RmState {
    pub e: DVector<f64>,
    pub t_diag: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `max_k |e_k^(t) - e_k^(t-1)|` per iteration.
    pub history: Vec<f64>,
}

/// `T = M (sum_j p_j Gamma_j / (1 + e_j) + D)^{-1}`, diagonal.
fn t_from_e(stats: &EstimationStats, p: &DVector<f64>, d: &DVector<f64>, e: &DVector<f64>) -> DVector<f64> {
    let m = stats.m() as f64;
    let w = DVector::from_fn(p.len(), |k, _| p[k] / (1.0 + e[k]));
    let mut denom = &stats.gamma * w;
    denom += d;
    denom.map(|x| m / x)
}

/// Iterates `e_k <- p_k tr(Gamma_k T(e)) / M` from `e = M` until the largest
/// relative change drops below `tol`.
pub fn rm_fixed_point(
    stats: &EstimationStats,
    alloc: &UlPowerAllocation,
    rho_u: f64,
    tol: f64,
    max_iter: usize,
) -> RmState {
    let m = stats.m() as f64;
    let p = alloc.effective_snr(rho_u);
    let d = noise_plus_error_diag(stats, alloc, rho_u);
    let mut e = DVector::from_element(alloc.k(), m);
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let t = t_from_e(stats, &p, &d, &e);
        let traces = stats.gamma.tr_mul(&t);
        let next = p.component_mul(&traces) / m;
        iterations += 1;
        let step = next.iter().zip(e.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        history.push(step);
        let done = next
            .iter()
            .zip(e.iter())
            .all(|(a, b)| (a - b).abs() <= tol * a.abs());
        e = next;
        if done {
            converged = true;
            break;
        }
    }
    let t_diag = t_from_e(stats, &p, &d, &e);
    RmState { e, t_diag, iterations, converged, history }
}

/// Deterministic-equivalent SINR `rho_u nu_k eta_k tr(Gamma_k T) / M`.
pub fn rm_sinr(
    state: &RmState,
    stats: &EstimationStats,
    alloc: &UlPowerAllocation,
    rho_u: f64,
) -> Result<DVector<f64>> {
    if !state.converged {
        return Err(Error::NotConverged { algorithm: "rm_fixed_point", iterations: state.iterations });
    }
    let traces = stats.gamma.tr_mul(&state.t_diag);
    Ok(alloc.effective_snr(rho_u).component_mul(&traces) / stats.m() as f64)
}

/// Convenience: fixed point at default tolerances followed by [`rm_sinr`].
pub fn rm_sinr_default(stats: &EstimationStats, alloc: &UlPowerAllocation, rho_u: f64) -> Result<DVector<f64>> {
    let state = rm_fixed_point(stats, alloc, rho_u, RM_TOL, RM_MAX_ITER);
    rm_sinr(&state, stats, alloc, rho_u)
}

/// Spectral efficiency `log2(1 + SINR)` in bit/s/Hz.
pub fn spectral_efficiency(sinr: f64) -> f64 {
    (1.0 + sinr).log2()
}

/// Throughput in bit/s for a spectral efficiency: `B (tau_c - tau) / (2 tau_c) R`.
pub fn throughput(rate_se: f64, radio: &RadioConfig) -> f64 {
    radio.bandwidth * radio.data_fraction() * rate_se
}

/// Per-thing rates (bit/s/Hz) and throughputs (bit/s) of an SINR vector.
pub fn rate_and_throughput(sinr: &[f64], radio: &RadioConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if sinr.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Argument("SINR values must be non-negative".into()));
    }
    let rates: Vec<f64> = sinr.iter().map(|&s| spectral_efficiency(s)).collect();
    let tp = rates.iter().map(|&r| throughput(r, radio)).collect();
    Ok((rates, tp))
}
