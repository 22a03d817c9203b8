//! Uplink power control.
//!
//! * [`maxmin_exact`]: weighted max-min fixed point on the exact MMSE SINR of
//!   one channel draw.
//! * [`maxmin_rm`]: the same objective on the deterministic equivalent; only
//!   large-scale statistics are needed and every iteration is `O(MK)`.
//! * [`target_rate_rm`]: minimal powers reaching a common SINR target, with a
//!   good/poor reweighting pass when the target is out of reach for someone.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimation::{ChannelDraw, EstimationStats};
use crate::ul_perf::{mmse_covariance, rm_fixed_point, rm_sinr, UlPowerAllocation, RM_MAX_ITER, RM_TOL};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_U_GOOD: f64 = 1.0;
pub const DEFAULT_U_POOR: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct MaxMinExact {
    pub eta: DVector<f64>,
    pub d: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `max_k |d_k^(n+1) - d_k^(n)|` per iteration.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MaxMinRm {
    pub eta: DVector<f64>,
    pub t_diag: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TargetRate {
    pub eta: DVector<f64>,
    /// `true` for things whose full-power rate reaches the target.
    pub good_mask: Vec<bool>,
    /// Whether the reweighting pass was needed.
    pub reweighted: bool,
    /// Things whose coefficient had to be clamped to 1 after reweighting.
    pub unmet: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

fn check_weights(u: &DVector<f64>, nu: &DVector<f64>, k: usize) -> Result<()> {
    if u.len() != k || nu.len() != k {
        return Err(Error::Argument(format!("weight vectors must have length {k}")));
    }
    if u.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Argument("rate weights u must be positive".into()));
    }
    if nu.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Argument("power weights nu must be positive".into()));
    }
    Ok(())
}

fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `d_k = rho'_k g_hat_k^H (sum_k' c_k' J_k' + I)^{-1} g_hat_k` with
/// `J_k = g_hat_k g_hat_k^H + B_k - Gamma_k`.
fn d_values(
    draw: &ChannelDraw,
    err: &DMatrix<f64>,
    rho_w: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut diag = err * c;
    diag.add_scalar_mut(1.0);
    let s = mmse_covariance(&draw.g_hat, c, &diag);
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::numerical("maxmin_exact", "weighted covariance is not positive definite"))?;
    let x = chol.solve(&draw.g_hat);
    Ok(DVector::from_fn(c.len(), |k, _| rho_w[k] * draw.g_hat.column(k).dotc(&x.column(k)).re))
}

fn min_ratio(num: &DVector<f64>, den: &DVector<f64>) -> f64 {
    num.iter().zip(den.iter()).map(|(a, b)| a / b).fold(f64::INFINITY, f64::min)
}

/// `eta_k = alpha u_k / x_k` with `alpha = min_k x_k / u_k`; the minimizer
/// gets exactly 1.
fn normalized(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let ratios = x.component_div(u);
    let (arg, alpha) = ratios.argmin();
    let mut eta = ratios.map(|r| (alpha / r).min(1.0));
    eta[arg] = 1.0;
    eta
}

/// Weighted max-min power control on the exact SINR of one draw.
pub fn maxmin_exact(
    draw: &ChannelDraw,
    stats: &EstimationStats,
    u: &DVector<f64>,
    nu: &DVector<f64>,
    rho_u: f64,
    eps: f64,
    max_iter: usize,
) -> Result<MaxMinExact> {
    let k = stats.k();
    check_weights(u, nu, k)?;
    if !(eps > 0.0) {
        return Err(Error::Argument("tolerance must be positive".into()));
    }
    let rho_w = nu * rho_u;
    let err = &stats.beta - &stats.gamma;
    let mut d = d_values(draw, &err, &rho_w, &rho_w)?;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let alpha = min_ratio(&d, u);
        let c = DVector::from_fn(k, |i, _| alpha * rho_w[i] * u[i] / d[i]);
        let next = d_values(draw, &err, &rho_w, &c)?;
        iterations += 1;
        let step = max_abs_diff(&next, &d);
        history.push(step);
        d = next;
        if step <= eps {
            converged = true;
            break;
        }
    }
    let eta = normalized(&d, u);
    Ok(MaxMinExact { eta, d, iterations, converged, history })
}

/// `T^(0)` of the RM algorithms: deterministic equivalent at full power.
fn initial_t(stats: &EstimationStats, nu: &DVector<f64>, rho_u: f64) -> DVector<f64> {
    let k = stats.k();
    let alloc = UlPowerAllocation {
        eta: DVector::from_element(k, 1.0),
        u: DVector::from_element(k, 1.0),
        nu: nu.clone(),
    };
    rm_fixed_point(stats, &alloc, rho_u, RM_TOL, RM_MAX_ITER).t_diag
}

/// One application of the diagonal `T` update
/// `T = ((1/M) sum_k w_k (B_k - xi_k/(1+xi_k) Gamma_k) + I/M)^{-1}`,
/// with `w_k` already holding `alpha rho_u u_k / tr(Gamma_k T)`.
fn t_update(stats: &EstimationStats, w: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
    let m = stats.m() as f64;
    let shrink = DVector::from_fn(w.len(), |k, _| w[k] * xi[k] / (1.0 + xi[k]));
    let mut acc = &stats.beta * w;
    acc -= &stats.gamma * shrink;
    acc.map(|v| m / (v + 1.0))
}

fn traces(stats: &EstimationStats, t: &DVector<f64>) -> DVector<f64> {
    stats.gamma.tr_mul(t)
}

/// Weighted max-min power control on the deterministic-equivalent SINR.
pub fn maxmin_rm(
    stats: &EstimationStats,
    u: &DVector<f64>,
    nu: &DVector<f64>,
    rho_u: f64,
    eps: f64,
    max_iter: usize,
) -> Result<MaxMinRm> {
    let k = stats.k();
    let m = stats.m() as f64;
    check_weights(u, nu, k)?;
    if !(eps > 0.0) {
        return Err(Error::Argument("tolerance must be positive".into()));
    }
    let mut t = initial_t(stats, nu, rho_u);
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let tr = traces(stats, &t);
        let alpha = min_ratio(&nu.component_mul(&tr), u);
        let w = DVector::from_fn(k, |i, _| alpha * rho_u * u[i] / tr[i]);
        let xi = u * (rho_u * alpha / m);
        let next = t_update(stats, &w, &xi);
        iterations += 1;
        let step = max_abs_diff(&next, &t);
        history.push(step);
        t = next;
        if step <= eps {
            converged = true;
            break;
        }
    }
    let tr = traces(stats, &t);
    let eta = normalized(&nu.component_mul(&tr), u);
    Ok(MaxMinRm { eta, t_diag: t, iterations, converged, history })
}

/// Iterates the `T` update with fixed per-thing weights until convergence.
fn iterate_fixed_targets(
    stats: &EstimationStats,
    t0: DVector<f64>,
    scale: &DVector<f64>,
    xi: &DVector<f64>,
    eps: f64,
    max_iter: usize,
) -> (DVector<f64>, usize, bool) {
    let mut t = t0;
    for it in 1..=max_iter {
        let tr = traces(stats, &t);
        let w = DVector::from_fn(scale.len(), |i, _| scale[i] / tr[i]);
        let next = t_update(stats, &w, xi);
        let step = max_abs_diff(&next, &t);
        t = next;
        if step <= eps {
            return (t, it, true);
        }
    }
    (t, max_iter, false)
}

/// Target-SINR power control on the deterministic equivalent.
///
/// First every thing aims at `target_sinr`. If that needs `eta_k > 1` for
/// someone, things are split by their full-power RM rate into good (weight
/// `u_good`) and poor (weight `u_poor`) and the poor ones aim at the scaled
/// target `target_sinr * u_poor / u_good`.
#[allow(clippy::too_many_arguments)]
pub fn target_rate_rm(
    stats: &EstimationStats,
    nu: &DVector<f64>,
    rho_u: f64,
    target_sinr: f64,
    u_good: f64,
    u_poor: f64,
    eps: f64,
    max_iter: usize,
) -> Result<TargetRate> {
    let k = stats.k();
    let m = stats.m() as f64;
    check_weights(&DVector::from_element(k, 1.0), nu, k)?;
    if !(target_sinr > 0.0) {
        return Err(Error::Argument("target SINR must be positive".into()));
    }
    if !(u_poor > 0.0 && u_poor <= u_good) {
        return Err(Error::Argument("need 0 < u_poor <= u_good".into()));
    }
    let t0 = initial_t(stats, nu, rho_u);

    let alpha = target_sinr * m / rho_u;
    let scale = DVector::from_element(k, alpha * rho_u);
    let xi = DVector::from_element(k, target_sinr);
    let (t, it1, conv1) = iterate_fixed_targets(stats, t0.clone(), &scale, &xi, eps, max_iter);
    let tr = traces(stats, &t);
    let eta = DVector::from_fn(k, |i, _| alpha / (nu[i] * tr[i]));

    let full = UlPowerAllocation {
        eta: DVector::from_element(k, 1.0),
        u: DVector::from_element(k, 1.0),
        nu: nu.clone(),
    };
    let full_state = rm_fixed_point(stats, &full, rho_u, RM_TOL, RM_MAX_ITER);
    let full_sinr = rm_sinr(&full_state, stats, &full, rho_u)?;
    let good_mask: Vec<bool> = full_sinr.iter().map(|&s| s >= target_sinr).collect();

    if conv1 && eta.iter().all(|&e| (0.0..=1.0).contains(&e)) {
        return Ok(TargetRate {
            eta,
            good_mask,
            reweighted: false,
            unmet: Vec::new(),
            iterations: it1,
            converged: true,
        });
    }

    let u = DVector::from_fn(k, |i, _| if good_mask[i] { u_good } else { u_poor });
    let alpha = alpha / u_good;
    let scale = u.map(|ui| alpha * rho_u * ui);
    let xi = u.map(|ui| target_sinr * ui / u_good);
    let (t, it2, conv2) = iterate_fixed_targets(stats, t0, &scale, &xi, eps, max_iter);
    let tr = traces(stats, &t);
    let raw = DVector::from_fn(k, |i, _| alpha * u[i] / (nu[i] * tr[i]));
    let unmet = raw.iter().enumerate().filter(|(_, &e)| e > 1.0).map(|(i, _)| i).collect();
    Ok(TargetRate {
        eta: raw.map(|e| e.min(1.0)),
        good_mask,
        reweighted: true,
        unmet,
        iterations: it1 + it2,
        converged: conv2,
    })
}

/// Uplink energy efficiency `sum_k R_k / (P_u sum_k eta_k)`.
pub fn ul_energy_efficiency(rates: &[f64], eta: &[f64], p_u: f64) -> Result<f64> {
    let total: f64 = eta.iter().sum();
    if !(total > 0.0) || !(p_u > 0.0) {
        return Err(Error::Argument("energy efficiency undefined for zero transmit power".into()));
    }
    Ok(rates.iter().sum::<f64>() / (p_u * total))
}
