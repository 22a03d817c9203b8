//! Network scenario generation.
//!
//! APs and things are dropped uniformly on a `D x D` square that wraps around
//! as a torus. Large-scale fading combines a three-slope path loss built on
//! the Hata-COST231 constant with log-normal shadowing, either i.i.d. or
//! correlated through an AP-side and a thing-side Gaussian field.

use std::path::Path;

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{complex_normal_matrix, seeded, SimRng};

pub type Point = [f64; 2];

/// Smallest AP-thing distance fed to the path-loss model, in meters.
pub const MIN_DISTANCE: f64 = 1.0;

/// Diagonal jitter added to shadowing covariance matrices before factorization.
const COVARIANCE_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShadowMode {
    Iid,
    Correlated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PilotMode {
    /// i.i.d. complex Gaussian columns normalized to unit norm.
    Random,
    /// `K` columns of a random `tau x tau` unitary; needs `K <= tau`.
    Orthogonal,
}

/// Radio and propagation constants. Distances in meters, powers in mW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    /// Carrier frequency in GHz.
    pub carrier_freq: f64,
    /// Bandwidth in Hz.
    pub bandwidth: f64,
    /// Pilot length `tau` in symbols.
    pub pilot_len: usize,
    /// Coherence interval `tau_c` in symbols.
    pub coherence_len: usize,
    pub p_u: f64,
    pub p_p: f64,
    pub p_d: f64,
    /// Receiver noise figure in dB.
    pub noise_figure: f64,
    /// Shadowing standard deviation in dB.
    pub sigma_sh: f64,
    pub shadow_mode: ShadowMode,
    pub shadow_decorr_dist: f64,
    /// Share `delta` of the shadowing variance carried by the AP-side field.
    pub shadow_split: f64,
    pub ap_height: f64,
    pub thing_height: f64,
    pub d0: f64,
    pub d1: f64,
    pub pilot_mode: PilotMode,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            carrier_freq: 1.9,
            bandwidth: 20e6,
            pilot_len: 32,
            coherence_len: 200,
            p_u: 20.0,
            p_p: 20.0,
            p_d: 200.0,
            noise_figure: 9.0,
            sigma_sh: 8.0,
            shadow_mode: ShadowMode::Correlated,
            shadow_decorr_dist: 100.0,
            shadow_split: 0.5,
            ap_height: 15.0,
            thing_height: 1.65,
            d0: 10.0,
            d1: 50.0,
            pilot_mode: PilotMode::Random,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.pilot_len < 1 {
            return bad("pilot_len must be at least 1");
        }
        if self.coherence_len <= self.pilot_len {
            return bad("coherence_len must exceed pilot_len");
        }
        if !(self.p_u > 0.0 && self.p_p > 0.0 && self.p_d > 0.0) {
            return bad("transmit powers must be positive");
        }
        if !(self.carrier_freq > 0.0 && self.bandwidth > 0.0) {
            return bad("carrier_freq and bandwidth must be positive");
        }
        if !(0.0..=1.0).contains(&self.shadow_split) {
            return bad("shadow_split must lie in [0, 1]");
        }
        if !(self.d0 > 0.0 && self.d0 < self.d1) {
            return bad("path-loss breakpoints need 0 < d0 < d1");
        }
        if !(self.sigma_sh >= 0.0) {
            return bad("sigma_sh must be non-negative");
        }
        if self.shadow_mode == ShadowMode::Correlated && !(self.shadow_decorr_dist > 0.0) {
            return bad("shadow_decorr_dist must be positive for correlated shadowing");
        }
        if !(self.ap_height > 0.0 && self.thing_height > 0.0) {
            return bad("antenna heights must be positive");
        }
        Ok(())
    }

    /// Hata-COST231 constant `L` in dB.
    pub fn hata_constant_db(&self) -> f64 {
        let f_mhz = self.carrier_freq * 1e3;
        let lf = f_mhz.log10();
        46.3 + 33.9 * lf
            - 13.82 * self.ap_height.log10()
            - (1.1 * lf - 0.7) * self.thing_height
            + (1.56 * lf - 0.8)
    }

    /// Thermal noise power in mW: -174 dBm/Hz over the bandwidth plus the noise figure.
    pub fn noise_power_mw(&self) -> f64 {
        let dbm = -174.0 + 10.0 * self.bandwidth.log10() + self.noise_figure;
        10f64.powf(dbm / 10.0)
    }

    /// Fraction of the coherence interval spent on data in each direction.
    pub fn data_fraction(&self) -> f64 {
        let tc = self.coherence_len as f64;
        let tp = (self.pilot_len as f64).min(tc);
        (tc - tp) / (2.0 * tc)
    }
}

/// A generated (or hand-built) network instance.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub m: usize,
    pub k: usize,
    pub side: f64,
    pub ap_pos: Vec<Point>,
    pub thing_pos: Vec<Point>,
    /// Large-scale fading, `M x K`, linear.
    pub beta: DMatrix<f64>,
    /// Pilot book, `tau x K`, unit-norm columns.
    pub pilots: DMatrix<Complex<f64>>,
    pub rho_p: f64,
    pub rho_u: f64,
    pub rho_d: f64,
    pub seed: u64,
    pub radio: RadioConfig,
}

impl Scenario {
    /// Builds a scenario from explicit fading and pilots (no geometry). SNRs
    /// come from `radio`.
    pub fn from_parts(
        beta: DMatrix<f64>,
        pilots: DMatrix<Complex<f64>>,
        radio: RadioConfig,
    ) -> Result<Scenario> {
        let (m, k) = beta.shape();
        if m == 0 || k == 0 {
            return Err(Error::Argument("empty fading matrix".into()));
        }
        if pilots.ncols() != k {
            return Err(Error::Argument(format!(
                "pilot book has {} columns for {k} things",
                pilots.ncols()
            )));
        }
        if beta.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
            return Err(Error::Argument("large-scale fading must be positive".into()));
        }
        let mut radio = radio;
        radio.pilot_len = pilots.nrows();
        radio.validate()?;
        let n0 = radio.noise_power_mw();
        Ok(Scenario {
            m,
            k,
            side: 0.0,
            ap_pos: vec![[0.0; 2]; m],
            thing_pos: vec![[0.0; 2]; k],
            beta,
            pilots,
            rho_p: radio.p_p / n0,
            rho_u: radio.p_u / n0,
            rho_d: radio.p_d / n0,
            seed: 0,
            radio,
        })
    }

    pub fn tau(&self) -> usize {
        self.pilots.nrows()
    }

    /// Network density in APs per square kilometer.
    pub fn density_per_km2(&self) -> f64 {
        self.m as f64 / (self.side * self.side / 1e6)
    }

    pub fn dump(&self) -> ScenarioDump {
        ScenarioDump {
            seed: self.seed,
            m: self.m,
            k: self.k,
            side: self.side,
            ap_pos: self.ap_pos.clone(),
            thing_pos: self.thing_pos.clone(),
            beta_db: (0..self.m)
                .map(|m| (0..self.k).map(|k| 10.0 * self.beta[(m, k)].log10()).collect())
                .collect(),
            rho_p: self.rho_p,
            rho_u: self.rho_u,
            rho_d: self.rho_d,
        }
    }
}

/// Serializable snapshot of a scenario (fading in dB, row per AP).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioDump {
    pub seed: u64,
    pub m: usize,
    pub k: usize,
    pub side: f64,
    pub ap_pos: Vec<Point>,
    pub thing_pos: Vec<Point>,
    pub beta_db: Vec<Vec<f64>>,
    pub rho_p: f64,
    pub rho_u: f64,
    pub rho_d: f64,
}

/// Scenario parameters as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(alias = "M")]
    pub m: usize,
    #[serde(alias = "K")]
    pub k: usize,
    /// Side `D` of the square in meters.
    #[serde(alias = "D")]
    pub side: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub radio: RadioConfig,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<ScenarioConfig> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn generate(&self) -> Result<Scenario> {
        generate_scenario(self.m, self.k, self.side, &self.radio, self.seed)
    }
}

/// Torus distance between `p` and `q` on a square of side `side`.
pub fn wrap_distance(p: Point, q: Point, side: f64) -> f64 {
    let mut best = f64::INFINITY;
    for sx in [-1.0, 0.0, 1.0] {
        for sy in [-1.0, 0.0, 1.0] {
            let dx = p[0] - (q[0] + sx * side);
            let dy = p[1] - (q[1] + sy * side);
            best = best.min(dx.hypot(dy));
        }
    }
    best
}

/// Three-slope path loss in dB (a negative number). `d` in meters.
pub fn path_loss_db(d: f64, cfg: &RadioConfig) -> f64 {
    let l = cfg.hata_constant_db();
    let d_km = d.max(MIN_DISTANCE) / 1e3;
    let d0 = cfg.d0 / 1e3;
    let d1 = cfg.d1 / 1e3;
    if d_km > d1 {
        -l - 35.0 * d_km.log10()
    } else if d_km > d0 {
        -l - 15.0 * d1.log10() - 20.0 * d_km.log10()
    } else {
        -l - 15.0 * d1.log10() - 20.0 * d0.log10()
    }
}

/// Three-slope path loss as a linear power gain.
pub fn path_loss(d: f64, cfg: &RadioConfig) -> f64 {
    10f64.powf(path_loss_db(d, cfg) / 10.0)
}

/// Zero-mean unit-variance Gaussian field over `points` with covariance
/// `exp(-dist / decorr)` under the torus metric.
///
/// The kernel of the wrapped distance is not always positive definite (dense
/// layouts on a small torus); when Cholesky fails the covariance is factored
/// through its eigendecomposition with negative eigenvalues clipped to zero.
fn gaussian_field(points: &[Point], side: f64, decorr: f64, rng: &mut SimRng) -> Result<Vec<f64>> {
    let n = points.len();
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let d = wrap_distance(points[i], points[j], side);
        (-d / decorr).exp() + if i == j { COVARIANCE_JITTER } else { 0.0 }
    });
    let white = nalgebra::DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let field = match cov.clone().cholesky() {
        Some(chol) => chol.l() * white,
        None => {
            let eig = cov.symmetric_eigen();
            let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            &eig.eigenvectors * white.component_mul(&root)
        }
    };
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("shadow_field", "non-finite shadowing sample"));
    }
    Ok(field.iter().copied().collect())
}

/// Standard-normal shadowing exponents `z_mk`, `M x K`.
pub fn shadow_field(
    ap_pos: &[Point],
    thing_pos: &[Point],
    side: f64,
    cfg: &RadioConfig,
    rng: &mut SimRng,
) -> Result<DMatrix<f64>> {
    let (m, k) = (ap_pos.len(), thing_pos.len());
    match cfg.shadow_mode {
        ShadowMode::Iid => Ok(DMatrix::from_fn(m, k, |_, _| rng.sample(StandardNormal))),
        ShadowMode::Correlated => {
            if !(cfg.shadow_decorr_dist > 0.0) {
                return Err(Error::Config("shadow_decorr_dist must be positive".into()));
            }
            let a = gaussian_field(ap_pos, side, cfg.shadow_decorr_dist, rng)?;
            let b = gaussian_field(thing_pos, side, cfg.shadow_decorr_dist, rng)?;
            let (wa, wb) = (cfg.shadow_split.sqrt(), (1.0 - cfg.shadow_split).sqrt());
            Ok(DMatrix::from_fn(m, k, |i, j| wa * a[i] + wb * b[j]))
        }
    }
}

/// Pilot book of `k` unit-norm columns of length `tau`.
pub fn generate_pilots(
    tau: usize,
    k: usize,
    mode: PilotMode,
    rng: &mut SimRng,
) -> Result<DMatrix<Complex<f64>>> {
    match mode {
        PilotMode::Random => {
            let mut psi = complex_normal_matrix(tau, k, rng);
            for mut col in psi.column_iter_mut() {
                let norm = col.norm();
                col /= Complex::from(norm);
            }
            Ok(psi)
        }
        PilotMode::Orthogonal => {
            if k > tau {
                return Err(Error::Config(format!(
                    "orthogonal pilots need K <= tau (K = {k}, tau = {tau})"
                )));
            }
            let q = complex_normal_matrix(tau, tau, rng).qr().q();
            Ok(q.columns(0, k).into_owned())
        }
    }
}

/// Draws a full scenario. Everything random comes from `seed`.
pub fn generate_scenario(
    m: usize,
    k: usize,
    side: f64,
    cfg: &RadioConfig,
    seed: u64,
) -> Result<Scenario> {
    cfg.validate()?;
    if m < 1 || k < 1 {
        return Err(Error::Config("need at least one AP and one thing".into()));
    }
    if !(side > 0.0) {
        return Err(Error::Config("side must be positive".into()));
    }
    let mut rng = seeded(seed);
    let mut drop = |n: usize| -> Vec<Point> {
        (0..n)
            .map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side])
            .collect()
    };
    let ap_pos = drop(m);
    let thing_pos = drop(k);
    let z = shadow_field(&ap_pos, &thing_pos, side, cfg, &mut rng)?;
    let beta = DMatrix::from_fn(m, k, |i, j| {
        let pl = path_loss(wrap_distance(ap_pos[i], thing_pos[j], side), cfg);
        if cfg.sigma_sh == 0.0 {
            pl
        } else {
            pl * 10f64.powf(cfg.sigma_sh * z[(i, j)] / 10.0)
        }
    });
    let pilots = generate_pilots(cfg.pilot_len, k, cfg.pilot_mode, &mut rng)?;
    let n0 = cfg.noise_power_mw();
    Ok(Scenario {
        m,
        k,
        side,
        ap_pos,
        thing_pos,
        beta,
        pilots,
        rho_p: cfg.p_p / n0,
        rho_u: cfg.p_u / n0,
        rho_d: cfg.p_d / n0,
        seed,
        radio: cfg.clone(),
    })
}
