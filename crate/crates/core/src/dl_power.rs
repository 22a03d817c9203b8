//! Downlink maximum-ratio precoding: closed-form SINR and power control.
//!
//! Power coefficients `eta_mk` live in an `M x K` matrix; AP `m` radiates the
//! normalized power `p_m = sum_k eta_mk gamma_mk <= 1`.
//!
//! The full max-min problem is quasi-concave and is solved by geometric
//! bisection over the SINR target, each step a second-order cone program in
//! `y_mk = sqrt(eta_mk gamma_mk)`. With the per-AP powers fixed, the
//! denominators become constants and the problem is a single cone program.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::EstimationStats;
use crate::netgen::{RadioConfig, Scenario};
use crate::ul_perf::{spectral_efficiency, throughput};

type C64 = Complex<f64>;

/// Relative width of the final bisection bracket.
pub const DEFAULT_TOL: f64 = 1e-3;
const POWER_SLACK: f64 = 1e-8;
/// Relative SINR shortfall tolerated when verifying a solver point.
const VERIFY_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DlPowerAllocation {
    pub eta: DMatrix<f64>,
    pub p: DVector<f64>,
}

impl DlPowerAllocation {
    pub fn zeros(m: usize, k: usize) -> Self {
        DlPowerAllocation { eta: DMatrix::zeros(m, k), p: DVector::zeros(m) }
    }

    /// Wraps coefficients and derives the per-AP powers from them.
    pub fn from_eta(eta: DMatrix<f64>, stats: &EstimationStats) -> Result<Self> {
        if eta.shape() != stats.gamma.shape() {
            return Err(Error::Argument(format!(
                "power matrix is {:?}, expected {:?}",
                eta.shape(),
                stats.gamma.shape()
            )));
        }
        if eta.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
            return Err(Error::Argument("power coefficients must be finite and non-negative".into()));
        }
        let p = per_ap_power(&eta, stats);
        Ok(DlPowerAllocation { eta, p })
    }

    pub fn validate(&self, stats: &EstimationStats) -> Result<()> {
        let p = per_ap_power(&self.eta, stats);
        for m in 0..p.len() {
            if (p[m] - self.p[m]).abs() > POWER_SLACK {
                return Err(Error::Argument(format!("AP {m}: p = {} but coefficients give {}", self.p[m], p[m])));
            }
            if p[m] > 1.0 + POWER_SLACK {
                return Err(Error::Argument(format!("AP {m} exceeds its power budget: {}", p[m])));
            }
        }
        Ok(())
    }
}

/// `p_m = sum_k eta_mk gamma_mk`.
pub fn per_ap_power(eta: &DMatrix<f64>, stats: &EstimationStats) -> DVector<f64> {
    let prod = eta.component_mul(&stats.gamma);
    DVector::from_fn(eta.nrows(), |m, _| prod.row(m).sum())
}

/// Uniform rule: `eta_mk = p_m / sum_k gamma_mk` for every thing.
pub fn uniform_power(stats: &EstimationStats, p: &DVector<f64>) -> Result<DlPowerAllocation> {
    if p.len() != stats.m() {
        return Err(Error::Argument(format!("need {} per-AP powers, got {}", stats.m(), p.len())));
    }
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Argument("per-AP powers must lie in [0, 1]".into()));
    }
    let mut eta = DMatrix::zeros(stats.m(), stats.k());
    let mut used = DVector::zeros(stats.m());
    for m in 0..stats.m() {
        let total: f64 = stats.gamma.row(m).sum();
        if total > 0.0 {
            eta.row_mut(m).fill(p[m] / total);
            used[m] = p[m];
        }
    }
    Ok(DlPowerAllocation { eta, p: used })
}

/// Power-independent pieces of the closed-form SINR at one AP.
struct ApTerms {
    /// `[k, k'] = beta_mk psi_k^H a_mk'`.
    cross: DMatrix<C64>,
    /// `||a_mk'||^2 + tau rho_p sum_j beta_mj |psi_j^H a_mk'|^2`.
    leak: DVector<f64>,
}

fn ap_terms(scn: &Scenario, stats: &EstimationStats, m: usize) -> Result<ApTerms> {
    let a = stats.a_block(scn, m)?;
    let trp = scn.tau() as f64 * scn.rho_p;
    let mut cross = scn.pilots.adjoint() * a.as_ref();
    let k = scn.k;
    let mut leak = DVector::zeros(k);
    for kp in 0..k {
        let mut acc = a.column(kp).norm_squared();
        for j in 0..k {
            acc += trp * scn.beta[(m, j)] * cross[(j, kp)].norm_sqr();
        }
        leak[kp] = acc;
    }
    for kk in 0..k {
        let b = scn.beta[(m, kk)];
        for kp in 0..k {
            cross[(kk, kp)] *= b;
        }
    }
    Ok(ApTerms { cross, leak })
}

/// Running sums of the closed-form SINR over APs.
#[derive(Clone)]
struct SinrAcc {
    signal: DVector<f64>,
    noise: DVector<f64>,
    coherent: DMatrix<C64>,
}

impl SinrAcc {
    fn new(k: usize) -> Self {
        SinrAcc { signal: DVector::zeros(k), noise: DVector::zeros(k), coherent: DMatrix::zeros(k, k) }
    }

    fn add_ap(&mut self, t: &ApTerms, m: usize, stats: &EstimationStats, eta: &DMatrix<f64>) {
        let k = stats.k();
        let leak_power: f64 = (0..k).map(|kp| eta[(m, kp)] * t.leak[kp]).sum();
        for kk in 0..k {
            let g = stats.gamma[(m, kk)];
            let b = stats.beta[(m, kk)];
            let e = eta[(m, kk)];
            self.signal[kk] += e.sqrt() * g;
            self.noise[kk] += e * g * b + b * (leak_power - e * t.leak[kk]);
            for kp in 0..k {
                if kp != kk {
                    self.coherent[(kk, kp)] += t.cross[(kk, kp)] * eta[(m, kp)].sqrt();
                }
            }
        }
    }

    fn merge(mut self, other: SinrAcc) -> SinrAcc {
        self.signal += other.signal;
        self.noise += other.noise;
        self.coherent += other.coherent;
        self
    }

    fn denominator(&self, rho_d: f64, trp: f64) -> DVector<f64> {
        DVector::from_fn(self.signal.len(), |kk, _| {
            let coh: f64 = self.coherent.row(kk).iter().map(|c| c.norm_sqr()).sum();
            1.0 + rho_d * self.noise[kk] + rho_d * trp * coh
        })
    }

    fn finish(self, rho_d: f64, trp: f64) -> DVector<f64> {
        let den = self.denominator(rho_d, trp);
        DVector::from_fn(self.signal.len(), |kk, _| rho_d * self.signal[kk].powi(2) / den[kk])
    }
}

const AP_CHUNK: usize = 16;

/// Closed-form downlink SINR of every thing under MR precoding.
///
/// The sums run AP by AP, so memory stays at `O(K^2)` even when the
/// estimator vectors are not cached.
pub fn dl_sinr_closed_form(
    scn: &Scenario,
    stats: &EstimationStats,
    alloc: &DlPowerAllocation,
) -> Result<DVector<f64>> {
    Ok(dl_sinr_closed_form_many(scn, stats, &[alloc])?.pop().unwrap())
}

/// [`dl_sinr_closed_form`] for several allocations in one pass over the APs.
pub fn dl_sinr_closed_form_many(
    scn: &Scenario,
    stats: &EstimationStats,
    allocs: &[&DlPowerAllocation],
) -> Result<Vec<DVector<f64>>> {
    let k = stats.k();
    if allocs.iter().any(|a| a.eta.shape() != stats.gamma.shape()) {
        return Err(Error::Argument("power matrix does not match the scenario".into()));
    }
    // fixed chunks reduced in order keep the sums independent of scheduling
    let m_all: Vec<usize> = (0..stats.m()).collect();
    let partial: Vec<Vec<SinrAcc>> = m_all
        .par_chunks(AP_CHUNK)
        .map(|chunk| {
            let mut accs = vec![SinrAcc::new(k); allocs.len()];
            for &m in chunk {
                let t = ap_terms(scn, stats, m)?;
                for (acc, alloc) in accs.iter_mut().zip(allocs) {
                    acc.add_ap(&t, m, stats, &alloc.eta);
                }
            }
            Ok(accs)
        })
        .collect::<Result<_>>()?;
    let accs = partial
        .into_iter()
        .reduce(|a, b| a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect())
        .unwrap_or_else(|| vec![SinrAcc::new(k); allocs.len()]);
    let trp = scn.tau() as f64 * scn.rho_p;
    Ok(accs.into_iter().map(|acc| acc.finish(scn.rho_d, trp)).collect())
}

/// Cached per-AP terms for repeated SINR evaluations on small instances.
struct DlTerms {
    aps: Vec<ApTerms>,
    rho_d: f64,
    trp: f64,
}

impl DlTerms {
    fn new(scn: &Scenario, stats: &EstimationStats) -> Result<Self> {
        let aps = (0..stats.m()).map(|m| ap_terms(scn, stats, m)).collect::<Result<_>>()?;
        Ok(DlTerms { aps, rho_d: scn.rho_d, trp: scn.tau() as f64 * scn.rho_p })
    }

    fn accumulate(&self, stats: &EstimationStats, eta: &DMatrix<f64>) -> SinrAcc {
        let mut acc = SinrAcc::new(stats.k());
        for (m, t) in self.aps.iter().enumerate() {
            acc.add_ap(t, m, stats, eta);
        }
        acc
    }

    fn sinr(&self, stats: &EstimationStats, eta: &DMatrix<f64>) -> DVector<f64> {
        self.accumulate(stats, eta).finish(self.rho_d, self.trp)
    }

    /// Square root of the SINR denominator of every thing.
    fn sqrt_den(&self, stats: &EstimationStats, eta: &DMatrix<f64>) -> DVector<f64> {
        self.accumulate(stats, eta).denominator(self.rho_d, self.trp).map(f64::sqrt)
    }
}

/// `rho_d (sum_m sqrt(eta_mk) gamma_mk)^2 / (1 + rho_d sum_m p_m beta_mk)`:
/// the objective of the fixed-power problem, which ignores coherent
/// pilot-contamination interference.
pub fn dl_sinr_orth(stats: &EstimationStats, eta: &DMatrix<f64>, p: &DVector<f64>, rho_d: f64) -> DVector<f64> {
    let load = stats.beta.tr_mul(p);
    DVector::from_fn(stats.k(), |k, _| {
        let s: f64 = (0..stats.m()).map(|m| eta[(m, k)].sqrt() * stats.gamma[(m, k)]).sum();
        rho_d * s * s / (1.0 + rho_d * load[k])
    })
}

fn eta_from_y(y: &DMatrix<f64>, stats: &EstimationStats) -> DMatrix<f64> {
    y.zip_map(&stats.gamma, |v, g| if g > 0.0 { v * v / g } else { 0.0 })
}

/// Scales down any AP row that overshoots its budget through solver noise.
fn clip_rows(y: &mut DMatrix<f64>, budget: &DVector<f64>) {
    for m in 0..y.nrows() {
        let mut row = y.row_mut(m);
        row.apply(|v| *v = v.max(0.0));
        let n2 = row.norm_squared();
        if n2 > budget[m] && n2 > 0.0 {
            row *= (budget[m] / n2).sqrt();
        }
    }
}

struct Triplets {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
}

impl Triplets {
    fn new() -> Self {
        Triplets { rows: Vec::new(), cols: Vec::new(), vals: Vec::new(), b: Vec::new(), cones: Vec::new() }
    }

    /// Appends one constraint row `s = b - a^T x`; returns its index.
    fn row(&mut self, b: f64) -> usize {
        self.b.push(b);
        self.b.len() - 1
    }

    fn set(&mut self, row: usize, col: usize, val: f64) {
        if val != 0.0 {
            self.rows.push(row);
            self.cols.push(col);
            self.vals.push(val);
        }
    }

    fn solve(self, n: usize, p: CscMatrix<f64>, q: &[f64], tol: f64) -> Result<(SolverStatus, Vec<f64>)> {
        let a = CscMatrix::new_from_triplets(self.b.len(), n, self.rows, self.cols, self.vals);
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(200)
            .direct_solve_method("faer".into())
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .tol_feas(tol)
            .build()
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        let mut solver = DefaultSolver::new(&p, q, &a, &self.b, &self.cones, settings)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        solver.solve();
        Ok((solver.solution.status, solver.solution.x))
    }
}

fn is_feasible_status(s: SolverStatus) -> Option<bool> {
    match s {
        SolverStatus::Solved | SolverStatus::AlmostSolved => Some(true),
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Some(false),
        _ => None,
    }
}

enum FullMode {
    /// Least total power with every SINR at least `t`.
    MinPower { t: f64 },
    /// Largest common margin `u` with
    /// `sqrt(rho_d) S_k - lambda sqrt(D_k) >= u w_k`.
    Margin { lambda: f64, weight: DVector<f64> },
}

/// Cone program over `y_mk = sqrt(eta_mk gamma_mk)` and per-AP amplitudes
/// `r_m >= ||y_m||`.
///
/// Since `||a_mk'||^2 + tau rho_p sum_j beta_mj |psi_j^H a_mk'|^2 =
/// a_mk'^H C_m a_mk' = gamma_mk'`, the non-coherent interference at thing `k`
/// collapses to `sum_m beta_mk ||y_m||^2`, which keeps each thing's cone at
/// `2 + M + 2(K-1)` entries instead of `MK`.
///
/// Returns the solver status, `y` and (for the margin mode) `u`.
fn solve_full(
    terms: &DlTerms,
    stats: &EstimationStats,
    mode: &FullMode,
) -> Result<(SolverStatus, DMatrix<f64>, f64)> {
    let (m_aps, k) = stats.gamma.shape();
    let n_y = m_aps * k;
    let var = |m: usize, kk: usize| kk * m_aps + m;
    let amp = |m: usize| n_y + m;
    let u_var = n_y + m_aps;
    let n = match mode {
        FullMode::MinPower { .. } => n_y + m_aps,
        FullMode::Margin { .. } => n_y + m_aps + 1,
    };
    let rho_d = terms.rho_d;
    let mut tr = Triplets::new();

    for i in 0..n_y {
        let r = tr.row(0.0);
        tr.set(r, i, -1.0);
    }
    for m in 0..m_aps {
        let r = tr.row(1.0);
        tr.set(r, amp(m), 1.0);
    }
    tr.cones.push(SupportedConeT::NonnegativeConeT(n_y + m_aps));

    for m in 0..m_aps {
        let head = tr.row(0.0);
        tr.set(head, amp(m), -1.0);
        for kk in 0..k {
            let r = tr.row(0.0);
            tr.set(r, var(m, kk), -1.0);
        }
        tr.cones.push(SupportedConeT::SecondOrderConeT(k + 1));
    }

    let coh_scale = (rho_d * terms.trp).sqrt();
    for kk in 0..k {
        let head = tr.row(0.0);
        match *mode {
            FullMode::MinPower { t } => {
                for m in 0..m_aps {
                    tr.set(head, var(m, kk), -(rho_d * stats.gamma[(m, kk)] / t).sqrt());
                }
            }
            FullMode::Margin { lambda, ref weight } => {
                for m in 0..m_aps {
                    tr.set(head, var(m, kk), -(rho_d * stats.gamma[(m, kk)]).sqrt() / lambda);
                }
                tr.set(head, u_var, weight[kk] / lambda);
            }
        }
        tr.row(1.0);
        for m in 0..m_aps {
            let r = tr.row(0.0);
            tr.set(r, amp(m), -(rho_d * stats.beta[(m, kk)]).sqrt());
        }
        for kp in (0..k).filter(|&kp| kp != kk) {
            let re = tr.row(0.0);
            let im = tr.row(0.0);
            for m in 0..m_aps {
                let g = stats.gamma[(m, kp)];
                if g > 0.0 {
                    let c = terms.aps[m].cross[(kk, kp)] * (coh_scale / g.sqrt());
                    tr.set(re, var(m, kp), -c.re);
                    tr.set(im, var(m, kp), -c.im);
                }
            }
        }
        tr.cones.push(SupportedConeT::SecondOrderConeT(2 + m_aps + 2 * (k - 1)));
    }

    let (p, q) = match mode {
        FullMode::MinPower { .. } => {
            let p = CscMatrix::new(n, n, (0..=n).map(|i| i.min(n_y)).collect(), (0..n_y).collect(), vec![1.0; n_y]);
            (p, vec![0.0; n])
        }
        FullMode::Margin { .. } => {
            let mut q = vec![0.0; n];
            q[u_var] = -1.0;
            (CscMatrix::zeros((n, n)), q)
        }
    };
    let solver_tol = match mode {
        FullMode::MinPower { .. } => 1e-8,
        FullMode::Margin { .. } => 1e-6,
    };
    let (status, x) = tr.solve(n, p, &q, solver_tol)?;
    let mut y = DMatrix::from_fn(m_aps, k, |m, kk| x[var(m, kk)]);
    clip_rows(&mut y, &DVector::from_element(m_aps, 1.0));
    let u = if n > u_var { x[u_var] } else { 0.0 };
    Ok((status, y, u))
}

/// Upper bound on the max-min SINR: for each thing, the best it can do alone
/// with every AP at full power.
fn full_upper_bound(stats: &EstimationStats, rho_d: f64) -> f64 {
    (0..stats.k())
        .map(|k| {
            let coherent: f64 = stats.gamma.column(k).iter().map(|g| g.sqrt()).sum();
            let ratio: f64 = (0..stats.m())
                .filter(|&m| stats.gamma[(m, k)] > 0.0)
                .map(|m| stats.gamma[(m, k)] / stats.beta[(m, k)])
                .sum();
            let reach: f64 = stats.beta.column(k).sum() * rho_d;
            (rho_d * coherent * coherent).min(ratio * reach / (1.0 + reach))
        })
        .fold(f64::INFINITY, f64::min)
}

const MAX_OUTER: usize = 60;

#[derive(Debug, Clone)]
pub struct DlMaxMin {
    pub alloc: DlPowerAllocation,
    pub sinr: DVector<f64>,
    pub min_sinr: f64,
    /// Final bracket `[lo, hi]` on the optimal min SINR.
    pub bracket: (f64, f64),
    /// Cone programs solved.
    pub solves: usize,
    /// Whether the final least-power pass succeeded.
    pub polished: bool,
}

/// Max-min closed-form SINR over all feasible coefficients.
///
/// Each step fixes a target `t = lambda^2` and solves the convex problem
/// `F(lambda) = max_y min_k sqrt(rho_d) S_k(y) - lambda sqrt(D_k(y))`, where
/// `S_k` is the coherent gain and `D_k >= 1` the interference-plus-noise.
/// `F(lambda) > 0` proves `t` feasible and its maximizer has min SINR above
/// `t`, which becomes the next target; `D_k >= 1` also gives
/// `sqrt(t*) <= lambda + F(lambda)`. The search stops once the bracket is
/// within `tol` (relative). A last least-power solve at the lower end makes
/// every SINR constraint bind and picks a canonical point.
pub fn maxmin_dl_full(scn: &Scenario, stats: &EstimationStats, tol: f64) -> Result<DlMaxMin> {
    if !(tol > 0.0) {
        return Err(Error::Argument("bracket tolerance must be positive".into()));
    }
    let terms = DlTerms::new(scn, stats)?;
    let start = uniform_power(stats, &DVector::from_element(stats.m(), 1.0))?;
    let mut best_eta = start.eta;
    let mut best_sinr = terms.sinr(stats, &best_eta);
    // the fixed-power optimum at full budgets is a cheap, usually much better
    // starting point
    let warm = maxmin_dl_given_p(stats, &DVector::from_element(stats.m(), 1.0), scn.rho_d)?;
    let warm_sinr = terms.sinr(stats, &warm.alloc.eta);
    if warm_sinr.min() > best_sinr.min() {
        best_eta = warm.alloc.eta;
        best_sinr = warm_sinr;
    }
    let mut lo = best_sinr.min();
    let mut hi = full_upper_bound(stats, scn.rho_d).max(lo);
    if !(lo > 0.0) {
        return Err(Error::numerical("maxmin_dl_full", "uniform full power leaves a thing with zero SINR"));
    }
    let mut solves = 0;
    let mut weight = terms.sqrt_den(stats, &best_eta);
    while hi > lo * (1.0 + tol) && solves < MAX_OUTER {
        let lambda = lo.sqrt();
        let mode = FullMode::Margin { lambda, weight: weight.clone() };
        let (status, y, u) = solve_full(&terms, stats, &mode)?;
        solves += 1;
        if is_feasible_status(status) != Some(true) {
            return Err(Error::Solver(format!("max-min margin problem ended with {status:?}")));
        }
        hi = hi.min((lambda + u.max(0.0) * weight.max()).powi(2));
        let eta = eta_from_y(&y, stats);
        let sinr = terms.sinr(stats, &eta);
        if sinr.min() > lo {
            lo = sinr.min();
            weight = terms.sqrt_den(stats, &eta);
            best_eta = eta;
            best_sinr = sinr;
        } else {
            // no strict improvement: lambda is optimal to solver precision
            hi = hi.min(lo * (1.0 + tol));
        }
        if hi < lo * (1.0 - VERIFY_SLACK) {
            return Err(Error::Solver(format!("bracket inverted: [{lo}, {hi}]")));
        }
        hi = hi.max(lo);
    }
    if hi > lo * (1.0 + tol) {
        return Err(Error::NotConverged { algorithm: "maxmin_dl_full", iterations: solves });
    }

    let target = lo * (1.0 - 0.25 * tol);
    let (status, y, _) = solve_full(&terms, stats, &FullMode::MinPower { t: target })?;
    solves += 1;
    let mut polished = false;
    if is_feasible_status(status) == Some(true) {
        let eta = eta_from_y(&y, stats);
        let sinr = terms.sinr(stats, &eta);
        if sinr.min() >= target * (1.0 - VERIFY_SLACK) {
            best_eta = eta;
            best_sinr = sinr;
            polished = true;
        }
    }
    let mut alloc = DlPowerAllocation::from_eta(best_eta, stats)?;
    // rows are clipped to the budget, so any excess is rounding
    alloc.p.apply(|v| *v = v.min(1.0));
    Ok(DlMaxMin { min_sinr: best_sinr.min(), sinr: best_sinr, alloc, bracket: (lo, hi), solves, polished })
}

#[derive(Debug, Clone)]
pub struct DlGivenP {
    pub alloc: DlPowerAllocation,
    /// Fixed-power objective at the returned point.
    pub sinr_orth: DVector<f64>,
    /// `p_m - sum_k eta_mk gamma_mk` at the cone-program optimum, before the
    /// rows were scaled up to their budgets.
    pub slack: DVector<f64>,
}

/// Max-min of the fixed-power objective with `sum_k eta_mk gamma_mk = p_m`.
///
/// Solved as one epigraph cone program with the budget relaxed to `<=`.
/// Scaling a row of non-negative `y` up raises every numerator and leaves the
/// fixed denominators alone, so each row is then scaled to its budget.
pub fn maxmin_dl_given_p(stats: &EstimationStats, p: &DVector<f64>, rho_d: f64) -> Result<DlGivenP> {
    let (m_aps, k) = stats.gamma.shape();
    if p.len() != m_aps {
        return Err(Error::Argument(format!("need {m_aps} per-AP powers, got {}", p.len())));
    }
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Argument("per-AP powers must lie in [0, 1]".into()));
    }
    // variables: y_mk for active (AP, thing) pairs, then the epigraph r
    let mut index = DMatrix::from_element(m_aps, k, usize::MAX);
    let mut n = 0;
    for kk in 0..k {
        for m in 0..m_aps {
            if p[m] > 0.0 && stats.gamma[(m, kk)] > 0.0 {
                index[(m, kk)] = n;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(DlGivenP {
            alloc: DlPowerAllocation::zeros(m_aps, k),
            sinr_orth: DVector::zeros(k),
            slack: p.clone(),
        });
    }
    let r_var = n;
    let den = stats.beta.tr_mul(p).map(|l| 1.0 + rho_d * l);

    let mut tr = Triplets::new();
    for i in 0..n {
        let r = tr.row(0.0);
        tr.set(r, i, -1.0);
    }
    for kk in 0..k {
        let r = tr.row(0.0);
        for m in 0..m_aps {
            if index[(m, kk)] != usize::MAX {
                tr.set(r, index[(m, kk)], -(rho_d * stats.gamma[(m, kk)] / den[kk]).sqrt());
            }
        }
        tr.set(r, r_var, 1.0);
    }
    tr.cones.push(SupportedConeT::NonnegativeConeT(n + k));
    for m in 0..m_aps {
        let active: Vec<usize> = (0..k).filter(|&kk| index[(m, kk)] != usize::MAX).collect();
        if active.is_empty() {
            continue;
        }
        tr.row(p[m].sqrt());
        for &kk in &active {
            let r = tr.row(0.0);
            tr.set(r, index[(m, kk)], -1.0);
        }
        tr.cones.push(SupportedConeT::SecondOrderConeT(active.len() + 1));
    }
    let mut q = vec![0.0; n + 1];
    q[r_var] = -1.0;
    let (status, x) = tr.solve(n + 1, CscMatrix::zeros((n + 1, n + 1)), &q, 1e-10)?;
    if is_feasible_status(status) != Some(true) {
        return Err(Error::Solver(format!("fixed-power max-min ended with {status:?}")));
    }

    let mut y = DMatrix::from_fn(m_aps, k, |m, kk| {
        let i = index[(m, kk)];
        if i == usize::MAX { 0.0 } else { x[i] }
    });
    clip_rows(&mut y, p);
    let mut slack = DVector::zeros(m_aps);
    for m in 0..m_aps {
        let n2 = y.row(m).norm_squared();
        slack[m] = p[m] - n2;
        if n2 > 0.0 {
            y.row_mut(m).scale_mut((p[m] / n2).sqrt());
        }
    }
    let eta = eta_from_y(&y, stats);
    let sinr_orth = dl_sinr_orth(stats, &eta, p, rho_d);
    let alloc = DlPowerAllocation::from_eta(eta, stats)?;
    Ok(DlGivenP { alloc, sinr_orth, slack })
}

#[derive(Debug, Clone)]
pub struct DlRates {
    pub se: Vec<f64>,
    pub rate_bps: Vec<f64>,
    /// `sum_k R_k / sum_m p_m P_d`.
    pub ee: f64,
}

/// Per-thing rates and downlink energy efficiency.
pub fn dl_rate_and_ee(sinr: &[f64], p: &[f64], p_d: f64, radio: &RadioConfig) -> Result<DlRates> {
    if sinr.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Argument("SINR values must be non-negative".into()));
    }
    let radiated: f64 = p.iter().sum::<f64>() * p_d;
    if !(radiated > 0.0) {
        return Err(Error::Argument("energy efficiency undefined for zero radiated power".into()));
    }
    let se: Vec<f64> = sinr.iter().map(|&s| spectral_efficiency(s)).collect();
    let rate_bps: Vec<f64> = se.iter().map(|&r| throughput(r, radio)).collect();
    let ee = rate_bps.iter().sum::<f64>() / radiated;
    Ok(DlRates { se, rate_bps, ee })
}
