//! LMMSE channel estimation from non-orthogonal pilots.
//!
//! For AP `m` the pilot observation covariance is
//! `C_m = tau rho_p Psi B_m Psi^H + I`. One Cholesky factorization of `C_m`
//! serves all `K` things: `a_mk = sqrt(tau rho_p) beta_mk C_m^{-1} psi_k`,
//! `g_hat_mk = a_mk^H y_m` and `gamma_mk = sqrt(tau rho_p) beta_mk psi_k^H a_mk`.

use std::borrow::Cow;

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::netgen::Scenario;
use crate::rng::{complex_normal, SimRng};

type C64 = Complex<f64>;

/// Above this many complex entries the `a_mk` vectors are recomputed per AP
/// on demand instead of being held in memory.
pub const A_STORE_LIMIT: usize = 1 << 22;

/// Second-order statistics of the channel estimates.
#[derive(Debug, Clone)]
pub struct EstimationStats {
    /// `gamma_mk`, `M x K`.
    pub gamma: DMatrix<f64>,
    /// Copy of `beta_mk`, `M x K`.
    pub beta: DMatrix<f64>,
    a: Option<Vec<DMatrix<C64>>>,
}

impl EstimationStats {
    pub fn m(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn k(&self) -> usize {
        self.gamma.ncols()
    }

    /// Diagonal of `B_m` (fading of every thing at AP `m`).
    pub fn b_diag(&self, m: usize) -> DVector<f64> {
        self.beta.row(m).transpose()
    }

    /// Diagonal of `Gamma_k` (estimate variance of thing `k` at every AP).
    pub fn gamma_diag(&self, k: usize) -> DVector<f64> {
        self.gamma.column(k).into_owned()
    }

    pub fn has_stored_a(&self) -> bool {
        self.a.is_some()
    }

    /// `tau x K` block `[a_m1, ..., a_mK]` of AP `m`.
    pub fn a_block<'a>(&'a self, scn: &Scenario, m: usize) -> Result<Cow<'a, DMatrix<C64>>> {
        match &self.a {
            Some(blocks) => Ok(Cow::Borrowed(&blocks[m])),
            None => Ok(Cow::Owned(ap_estimator(scn, m)?)),
        }
    }

    /// Analytic `E[g_hat_mk conj(g_hat_ml)] = sqrt(tau rho_p) beta_mk psi_k^H a_ml`
    /// at AP `m`, as a `K x K` matrix.
    pub fn estimate_covariance(&self, scn: &Scenario, m: usize) -> Result<DMatrix<C64>> {
        let a = self.a_block(scn, m)?;
        let s = (scn.tau() as f64 * scn.rho_p).sqrt();
        let mut cov = scn.pilots.adjoint() * a.as_ref();
        for k in 0..scn.k {
            let scale = C64::from(s * scn.beta[(m, k)]);
            for l in 0..scn.k {
                cov[(k, l)] *= scale;
            }
        }
        Ok(cov)
    }
}

/// `[a_m1 .. a_mK]` for one AP.
fn ap_estimator(scn: &Scenario, m: usize) -> Result<DMatrix<C64>> {
    let tau = scn.tau();
    let trp = tau as f64 * scn.rho_p;
    let psi = &scn.pilots;
    let mut weighted = psi.clone();
    for (k, mut col) in weighted.column_iter_mut().enumerate() {
        col *= C64::from(trp * scn.beta[(m, k)]);
    }
    let mut cov = &weighted * psi.adjoint();
    for i in 0..tau {
        cov[(i, i)] += C64::from(1.0);
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::numerical("compute_stats", format!("pilot covariance of AP {m} is singular")))?;
    let mut a = chol.solve(psi);
    let s = trp.sqrt();
    for (k, mut col) in a.column_iter_mut().enumerate() {
        col *= C64::from(s * scn.beta[(m, k)]);
    }
    Ok(a)
}

/// Computes `gamma_mk` (and keeps `a_mk` when it fits in memory).
pub fn compute_stats(scn: &Scenario) -> Result<EstimationStats> {
    let store = scn.m * scn.tau() * scn.k <= A_STORE_LIMIT;
    let s = (scn.tau() as f64 * scn.rho_p).sqrt();
    let per_ap: Vec<(Vec<f64>, Option<DMatrix<C64>>)> = (0..scn.m)
        .into_par_iter()
        .map(|m| {
            let a = ap_estimator(scn, m)?;
            let mut gammas = Vec::with_capacity(scn.k);
            for k in 0..scn.k {
                let form = scn.pilots.column(k).dotc(&a.column(k));
                // psi^H a / (s beta) = psi^H C^{-1} psi is a real quadratic form
                let unit = form / C64::from(s * scn.beta[(m, k)]);
                if unit.im.abs() > 1e-9 * unit.re.abs().max(1.0) {
                    return Err(Error::numerical(
                        "compute_stats",
                        format!("estimate variance has imaginary residue {:e}", unit.im),
                    ));
                }
                gammas.push((s * scn.beta[(m, k)] * form.re).clamp(0.0, scn.beta[(m, k)]));
            }
            Ok((gammas, store.then_some(a)))
        })
        .collect::<Result<_>>()?;
    let mut gamma = DMatrix::zeros(scn.m, scn.k);
    let mut blocks = Vec::with_capacity(if store { scn.m } else { 0 });
    for (m, (g, a)) in per_ap.into_iter().enumerate() {
        for (k, v) in g.into_iter().enumerate() {
            gamma[(m, k)] = v;
        }
        if let Some(a) = a {
            blocks.push(a);
        }
    }
    Ok(EstimationStats { gamma, beta: scn.beta.clone(), a: store.then_some(blocks) })
}

/// One small-scale fading realization with its pilot-phase estimates.
#[derive(Debug, Clone)]
pub struct ChannelDraw {
    /// True channels `g_mk`, `M x K`.
    pub g: DMatrix<C64>,
    /// LMMSE estimates, `M x K`.
    pub g_hat: DMatrix<C64>,
    /// Pilot observations, row `m` is `y_m^T`, `M x tau`.
    pub y: DMatrix<C64>,
}

impl ChannelDraw {
    /// Estimation error `g - g_hat`.
    pub fn error(&self) -> DMatrix<C64> {
        &self.g - &self.g_hat
    }
}

/// Draws `h_mk ~ CN(0,1)` and pilot noise, then forms the LMMSE estimates.
pub fn draw_channel(scn: &Scenario, stats: &EstimationStats, rng: &mut SimRng) -> Result<ChannelDraw> {
    let (m_count, k_count, tau) = (scn.m, scn.k, scn.tau());
    let mut g = DMatrix::zeros(m_count, k_count);
    for k in 0..k_count {
        for m in 0..m_count {
            g[(m, k)] = complex_normal(rng) * scn.beta[(m, k)].sqrt();
        }
    }
    let mut y = DMatrix::zeros(m_count, tau);
    for t in 0..tau {
        for m in 0..m_count {
            y[(m, t)] = complex_normal(rng);
        }
    }
    let s = C64::from((tau as f64 * scn.rho_p).sqrt());
    y += (&g * scn.pilots.transpose()) * s;
    let mut g_hat = DMatrix::zeros(m_count, k_count);
    for m in 0..m_count {
        let a = stats.a_block(scn, m)?;
        let y_m = y.row(m).transpose();
        let est = a.ad_mul(&y_m);
        g_hat.row_mut(m).copy_from(&est.transpose());
    }
    Ok(ChannelDraw { g, g_hat, y })
}

/// Sample covariance `Cov[g_hat_mk, g_hat_ml]`, averaged over APs, from
/// `n_draws` independent draws.
pub fn estimate_cross_cov(
    scn: &Scenario,
    stats: &EstimationStats,
    n_draws: usize,
    rng: &mut SimRng,
) -> Result<DMatrix<C64>> {
    if n_draws < 100 {
        return Err(Error::Argument(format!("need at least 100 draws, got {n_draws}")));
    }
    let (m_count, k_count) = (scn.m, scn.k);
    let mut second = vec![DMatrix::<C64>::zeros(k_count, k_count); m_count];
    let mut first = DMatrix::<C64>::zeros(m_count, k_count);
    for _ in 0..n_draws {
        let draw = draw_channel(scn, stats, rng)?;
        first += &draw.g_hat;
        for (m, acc) in second.iter_mut().enumerate() {
            let row = draw.g_hat.row(m).transpose();
            acc.ger(C64::from(1.0), &row, &row.map(|v| v.conj()), C64::from(1.0));
        }
    }
    let n = n_draws as f64;
    let mut out = DMatrix::<C64>::zeros(k_count, k_count);
    for (m, acc) in second.iter().enumerate() {
        let mean = first.row(m).transpose() / C64::from(n);
        for k in 0..k_count {
            for l in 0..k_count {
                let c = acc[(k, l)] / C64::from(n) - mean[k] * mean[l].conj();
                out[(k, l)] += c * C64::from(n / (n - 1.0));
            }
        }
    }
    Ok(out / C64::from(m_count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgen::{generate_pilots, generate_scenario, PilotMode, RadioConfig};
    use crate::rng::seeded;
    use approx::assert_relative_eq;

    fn radio(tau: usize) -> RadioConfig {
        RadioConfig { pilot_len: tau, ..Default::default() }
    }

    fn scalar(beta: f64, rho_p_mw: f64) -> Scenario {
        let mut cfg = radio(1);
        cfg.p_p = rho_p_mw;
        let pilots = DMatrix::from_element(1, 1, C64::from(1.0));
        Scenario::from_parts(DMatrix::from_element(1, 1, beta), pilots, cfg).unwrap()
    }

    #[test]
    fn single_thing_closed_form() {
        // gamma = tau rho_p beta^2 / (tau rho_p beta + 1) for any unit pilot
        let mut rng = seeded(1);
        for &(beta, tau) in &[(1e-9, 4usize), (3e-11, 1), (2e-10, 16)] {
            let pilots = generate_pilots(tau, 1, PilotMode::Random, &mut rng).unwrap();
            let scn =
                Scenario::from_parts(DMatrix::from_element(1, 1, beta), pilots, radio(tau)).unwrap();
            let st = compute_stats(&scn).unwrap();
            let trp = tau as f64 * scn.rho_p;
            assert_relative_eq!(st.gamma[(0, 0)], trp * beta * beta / (trp * beta + 1.0), max_relative = 1e-10);
        }
    }

    #[test]
    fn no_pilot_energy_means_no_estimate() {
        let scn = scalar(1e-9, 1e-12);
        let st = compute_stats(&scn).unwrap();
        assert!(st.gamma[(0, 0)] < 1e-6 * 1e-9);
    }

    #[test]
    fn orthogonal_pilots_high_snr_recover_beta() {
        let mut cfg = radio(8);
        cfg.pilot_mode = PilotMode::Orthogonal;
        cfg.p_p = 1e6;
        cfg.p_u = 1e6;
        let scn = generate_scenario(6, 5, 100.0, &cfg, 3).unwrap();
        let st = compute_stats(&scn).unwrap();
        for (g, b) in st.gamma.iter().zip(scn.beta.iter()) {
            assert!(g <= b);
            assert_relative_eq!(g, b, max_relative = 1e-3);
        }
        let mut rng = seeded(4);
        let draw = draw_channel(&scn, &st, &mut rng).unwrap();
        let err = draw.error();
        for (e, g) in err.iter().zip(draw.g.iter()) {
            assert!(e.norm() < 0.05 * g.norm().max(1e-7));
        }
    }

    #[test]
    fn gamma_never_exceeds_beta() {
        let scn = generate_scenario(20, 12, 500.0, &radio(6), 8).unwrap();
        let st = compute_stats(&scn).unwrap();
        assert!(st.has_stored_a());
        for (g, b) in st.gamma.iter().zip(scn.beta.iter()) {
            assert!(*g >= 0.0 && g <= b);
        }
    }

    #[test]
    fn estimates_are_linear_in_observations() {
        let scn = generate_scenario(4, 3, 200.0, &radio(2), 5).unwrap();
        let st = compute_stats(&scn).unwrap();
        let draw = draw_channel(&scn, &st, &mut seeded(6)).unwrap();
        for m in 0..4 {
            let a = st.a_block(&scn, m).unwrap();
            let y = draw.y.row(m).transpose();
            for k in 0..3 {
                let want = a.column(k).dotc(&y);
                assert!((draw.g_hat[(m, k)] - want).norm() < 1e-12 * want.norm().max(1e-30));
            }
        }
    }

    #[test]
    fn monte_carlo_variance_and_orthogonality() {
        // Var(g_hat) ~ gamma, and E[g_hat conj(g_tilde)] ~ 0
        let scn = generate_scenario(3, 4, 150.0, &radio(3), 21).unwrap();
        let st = compute_stats(&scn).unwrap();
        let mut rng = seeded(22);
        let n = 10_000;
        let mut var = DMatrix::<f64>::zeros(3, 4);
        let mut cross = DMatrix::<C64>::zeros(3, 4);
        let mut cross_sq = DMatrix::<f64>::zeros(3, 4);
        for _ in 0..n {
            let d = draw_channel(&scn, &st, &mut rng).unwrap();
            let e = d.error();
            for i in 0..3 {
                for k in 0..4 {
                    var[(i, k)] += d.g_hat[(i, k)].norm_sqr();
                    let c = d.g_hat[(i, k)] * e[(i, k)].conj();
                    cross[(i, k)] += c;
                    cross_sq[(i, k)] += c.norm_sqr();
                }
            }
        }
        let nf = n as f64;
        for i in 0..3 {
            for k in 0..4 {
                let v = var[(i, k)] / nf;
                assert_relative_eq!(v, st.gamma[(i, k)], max_relative = 0.05);
                let mean = cross[(i, k)] / nf;
                let se = (cross_sq[(i, k)] / nf / nf).sqrt();
                assert!(mean.norm() < 3.0 * se * std::f64::consts::SQRT_2, "{i},{k}: {mean} vs se {se}");
            }
        }
    }

    #[test]
    fn cross_cov_diagonal_matches_gamma() {
        let scn = generate_scenario(6, 4, 200.0, &radio(4), 30).unwrap();
        let st = compute_stats(&scn).unwrap();
        let cov = estimate_cross_cov(&scn, &st, 10_000, &mut seeded(31)).unwrap();
        for k in 0..4 {
            let mean_gamma = st.gamma.column(k).mean();
            assert_relative_eq!(cov[(k, k)].re, mean_gamma, max_relative = 0.05);
        }
        // analytic covariance has gamma on its diagonal
        let analytic = st.estimate_covariance(&scn, 2).unwrap();
        for k in 0..4 {
            assert_relative_eq!(analytic[(k, k)].re, st.gamma[(2, k)], max_relative = 1e-10);
        }
        assert!(estimate_cross_cov(&scn, &st, 50, &mut seeded(1)).is_err());
    }

    #[test]
    fn orthogonal_pilots_decouple_estimates() {
        let cfg = RadioConfig { pilot_len: 4, pilot_mode: PilotMode::Orthogonal, ..Default::default() };
        let scn = generate_scenario(5, 4, 200.0, &cfg, 40).unwrap();
        let st = compute_stats(&scn).unwrap();
        let n = 4000;
        let cov = estimate_cross_cov(&scn, &st, n, &mut seeded(41)).unwrap();
        for k in 0..4 {
            for l in 0..4 {
                if k != l {
                    let noise = (cov[(k, k)].re * cov[(l, l)].re).sqrt() / (n as f64).sqrt();
                    assert!(cov[(k, l)].norm() < 4.0 * noise, "{k},{l}");
                }
            }
        }
    }

    #[test]
    fn on_demand_blocks_match_stored() {
        let scn = generate_scenario(5, 3, 200.0, &radio(4), 50).unwrap();
        let st = compute_stats(&scn).unwrap();
        let fresh = ap_estimator(&scn, 2).unwrap();
        assert_eq!(st.a_block(&scn, 2).unwrap().as_ref(), &fresh);
    }
}
