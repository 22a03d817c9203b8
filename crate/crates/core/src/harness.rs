//! Experiment registry, runners and result files.
//!
//! Each experiment id maps to a scripted pipeline: draw scenarios, solve,
//! evaluate, aggregate. Everything random derives from the spec seed, so a
//! spec reproduces its CSV byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dl_power::{
    dl_rate_and_ee, dl_sinr_closed_form_many, maxmin_dl_full, maxmin_dl_given_p, uniform_power, DlPowerAllocation,
    DEFAULT_TOL,
};
use crate::error::{Error, Result};
use crate::estimation::{compute_stats, draw_channel, ChannelDraw, EstimationStats};
use crate::netgen::{RadioConfig, Scenario, ScenarioConfig};
use crate::regressor::{build_dataset, train_lm, FeatureSpec, LmParams, NetSpec, Regressor};
use crate::rng::{substream, SimRng};
use crate::ul_perf::{
    exact_mmse_sinr, noise_plus_error_diag, rm_fixed_point, rm_sinr, spectral_efficiency, throughput,
    UlPowerAllocation, RM_MAX_ITER, RM_TOL,
};
use crate::ul_power::{maxmin_exact, maxmin_rm, target_rate_rm, DEFAULT_EPS, DEFAULT_MAX_ITER, DEFAULT_U_GOOD, DEFAULT_U_POOR};

/// Crate version plus `git describe` of the build tree.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("CFIOT_GIT_DESCRIBE"));

pub const CSV_HEADER: [&str; 5] = ["thing_id", "trial", "rate_bps", "rate_se", "algorithm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    UlRmAccuracy,
    UlMaxminCompare,
    UlTargetEe,
    DlNnAreaTransfer,
    DlDensityTransfer,
    DlEeLarge,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        ExperimentId::UlRmAccuracy,
        ExperimentId::UlMaxminCompare,
        ExperimentId::UlTargetEe,
        ExperimentId::DlNnAreaTransfer,
        ExperimentId::DlDensityTransfer,
        ExperimentId::DlEeLarge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::UlRmAccuracy => "ul-rm-accuracy",
            ExperimentId::UlMaxminCompare => "ul-maxmin-compare",
            ExperimentId::UlTargetEe => "ul-target-ee",
            ExperimentId::DlNnAreaTransfer => "dl-nn-area-transfer",
            ExperimentId::DlDensityTransfer => "dl-density-transfer",
            ExperimentId::DlEeLarge => "dl-ee-large",
        }
    }

    fn is_downlink(self) -> bool {
        matches!(self, ExperimentId::DlNnAreaTransfer | ExperimentId::DlDensityTransfer | ExperimentId::DlEeLarge)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment id {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Scaled down to run on a workstation in minutes.
    Desk,
    /// Published sizes. Can take hours.
    Paper,
}

/// Size and geometry of one family of scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub m: usize,
    pub k: usize,
    pub tau: usize,
    pub area_km2: f64,
}

impl NetworkSpec {
    pub fn new(m: usize, k: usize, tau: usize, area_km2: f64) -> Self {
        NetworkSpec { m, k, tau, area_km2 }
    }

    pub fn side_m(&self) -> f64 {
        self.area_km2.sqrt() * 1000.0
    }

    /// APs per km^2.
    pub fn density(&self) -> f64 {
        self.m as f64 / self.area_km2
    }

    pub fn label(&self) -> String {
        format!("M{}K{}A{}", self.m, self.k, self.area_km2)
    }

    pub fn scenario_config(&self, radio: &RadioConfig, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            m: self.m,
            k: self.k,
            side: self.side_m(),
            seed,
            radio: RadioConfig { pilot_len: self.tau, ..radio.clone() },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.tau == 0 || !(self.area_km2 > 0.0) {
            return Err(Error::Config(format!("bad network {self:?}")));
        }
        Ok(())
    }
}

/// Downlink power-control arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DlArm {
    /// Full max-min program on the closed-form SINR.
    MaxminOpt,
    /// Uniform rule at full budgets.
    UniformFull,
    /// Uniform rule with the optimal per-AP powers.
    UniformOpt,
    /// Uniform rule with predicted per-AP powers.
    UniformNn,
    /// Fixed-power program with predicted per-AP powers.
    NnOrth,
    /// Fixed-power program with the optimal per-AP powers.
    OptOrth,
}

impl DlArm {
    pub fn name(self) -> &'static str {
        match self {
            DlArm::MaxminOpt => "maxmin-opt",
            DlArm::UniformFull => "uniform-full",
            DlArm::UniformOpt => "uniform-opt",
            DlArm::UniformNn => "uniform-nn",
            DlArm::NnOrth => "nn-orth",
            DlArm::OptOrth => "opt-orth",
        }
    }

    fn needs_full(self) -> bool {
        matches!(self, DlArm::MaxminOpt | DlArm::UniformOpt | DlArm::OptOrth)
    }

    fn needs_model(self) -> bool {
        matches!(self, DlArm::UniformNn | DlArm::NnOrth)
    }

    fn needs_given_p(self) -> bool {
        matches!(self, DlArm::NnOrth | DlArm::OptOrth)
    }
}

/// How the per-AP power predictor is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub networks: Vec<NetworkSpec>,
    /// Solved scenarios per training network.
    pub scenarios: usize,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub net: NetSpec,
    #[serde(default)]
    pub lm: LmParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    pub seed: u64,
    /// Scenarios per evaluation network.
    pub trials: usize,
    /// Small-scale fading draws per scenario (uplink experiments).
    pub draws: usize,
    pub networks: Vec<NetworkSpec>,
    /// `pilot_len` is taken from each network.
    pub radio: RadioConfig,
    /// Relative bracket tolerance of the full downlink program.
    pub dl_tol: f64,
    /// Arms needing the full downlink program are skipped above this `M*K`.
    pub full_max_mk: usize,
    /// Fixed-power downlink arms are skipped above this `M*K`.
    pub given_p_max_mk: usize,
    pub dl_arms: Vec<DlArm>,
    /// Run the per-draw exact max-min arm in `ul-maxmin-compare`.
    pub ul_exact_maxmin: bool,
    /// Percentile of full-power rates used as the target in `ul-target-ee`.
    pub target_percentile: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSpec>,
    /// Load a saved predictor instead of training one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    pub out: PathBuf,
}

fn dl_train(preset: Preset) -> TrainSpec {
    let scenarios = match preset {
        Preset::Desk => 80,
        Preset::Paper => 160,
    };
    TrainSpec {
        networks: vec![NetworkSpec::new(64, 16, 16, 0.03)],
        scenarios,
        features: FeatureSpec::default(),
        net: NetSpec::default(),
        lm: LmParams::default(),
    }
}

impl ExperimentSpec {
    /// Registry entry for `id` at the given scale.
    pub fn preset(id: ExperimentId, preset: Preset) -> ExperimentSpec {
        let desk = preset == Preset::Desk;
        let mut s = ExperimentSpec {
            id,
            seed: 1,
            trials: 1,
            draws: 1,
            networks: Vec::new(),
            radio: RadioConfig::default(),
            dl_tol: DEFAULT_TOL,
            full_max_mk: 1024,
            given_p_max_mk: 65_536,
            dl_arms: Vec::new(),
            ul_exact_maxmin: true,
            target_percentile: 10.0,
            train: None,
            model_path: None,
            out: PathBuf::from("results"),
        };
        match id {
            ExperimentId::UlRmAccuracy => {
                if desk {
                    s.networks = vec![NetworkSpec::new(256, 32, 32, 1.0)];
                    s.trials = 20;
                    s.draws = 200;
                } else {
                    s.networks = vec![NetworkSpec::new(1024, 256, 256, 1.0)];
                    s.radio.coherence_len = 512;
                    s.trials = 20;
                    s.draws = 200;
                }
            }
            ExperimentId::UlMaxminCompare => {
                s.networks = vec![NetworkSpec::new(128, 40, 60, 0.01)];
                s.trials = if desk { 10 } else { 50 };
                s.draws = if desk { 100 } else { 200 };
            }
            ExperimentId::UlTargetEe => {
                s.networks = vec![NetworkSpec::new(160, 40, 40, 1.0)];
                s.trials = if desk { 10 } else { 50 };
                s.draws = if desk { 50 } else { 200 };
            }
            ExperimentId::DlNnAreaTransfer => {
                let per_area = if desk { 10 } else { 30 };
                let train_nets =
                    [0.016, 0.063, 0.25, 0.56, 1.0, 4.0].iter().map(|&a| NetworkSpec::new(128, 4, 4, a)).collect();
                s.train = Some(TrainSpec { networks: train_nets, scenarios: per_area, ..dl_train(preset) });
                s.networks = vec![NetworkSpec::new(128, 4, 4, 0.72), NetworkSpec::new(128, 4, 4, 2.25)];
                s.trials = if desk { 5 } else { 20 };
                s.dl_arms = vec![DlArm::MaxminOpt, DlArm::NnOrth, DlArm::OptOrth, DlArm::UniformFull];
            }
            ExperimentId::DlDensityTransfer => {
                s.train = Some(dl_train(preset));
                s.networks = if desk {
                    vec![NetworkSpec::new(64, 16, 16, 0.03), NetworkSpec::new(128, 32, 32, 0.06)]
                } else {
                    vec![NetworkSpec::new(64, 16, 16, 0.03), NetworkSpec::new(256, 64, 64, 0.12)]
                };
                s.trials = if desk { 5 } else { 20 };
                s.dl_arms = vec![
                    DlArm::MaxminOpt,
                    DlArm::UniformFull,
                    DlArm::UniformOpt,
                    DlArm::UniformNn,
                    DlArm::NnOrth,
                    DlArm::OptOrth,
                ];
            }
            ExperimentId::DlEeLarge => {
                s.train = Some(dl_train(preset));
                s.networks = if desk {
                    vec![NetworkSpec::new(1024, 256, 256, 0.5)]
                } else {
                    vec![NetworkSpec::new(4096, 1024, 1024, 2.0)]
                };
                s.radio.coherence_len = if desk { 512 } else { 2048 };
                s.trials = 1;
                s.dl_arms = vec![DlArm::UniformFull, DlArm::UniformNn];
            }
        }
        s
    }

    /// Preset overlaid with an optional TOML document. Tables merge key by
    /// key; any other value replaces the preset's.
    pub fn resolve(id: ExperimentId, preset: Preset, overlay: Option<&str>) -> Result<ExperimentSpec> {
        let base = ExperimentSpec::preset(id, preset);
        let Some(text) = overlay else {
            base.validate()?;
            return Ok(base);
        };
        let over: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(&base)?;
        merge_tables(&mut merged, over);
        let spec: ExperimentSpec = merged.try_into()?;
        if spec.id != id {
            return Err(Error::Config(format!("config is for {} but {} was requested", spec.id, id)));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 || self.draws < 1 {
            return Err(Error::Config("trials and draws must be at least 1".into()));
        }
        if self.networks.is_empty() {
            return Err(Error::Config("no evaluation networks".into()));
        }
        for n in &self.networks {
            n.validate()?;
            RadioConfig { pilot_len: n.tau, ..self.radio.clone() }.validate()?;
        }
        if !(self.dl_tol > 0.0 && self.dl_tol < 1.0) {
            return Err(Error::Config("dl_tol must lie in (0, 1)".into()));
        }
        if !(0.0..=100.0).contains(&self.target_percentile) {
            return Err(Error::Config("target_percentile must lie in [0, 100]".into()));
        }
        if let Some(t) = &self.train {
            if t.networks.is_empty() || t.scenarios < 1 {
                return Err(Error::Config("training needs at least one network and scenario".into()));
            }
            for n in &t.networks {
                n.validate()?;
            }
            t.lm.validate()?;
        }
        if self.id.is_downlink() && self.dl_arms.is_empty() {
            return Err(Error::Config("downlink experiment without arms".into()));
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub thing_id: usize,
    pub trial: usize,
    pub rate_bps: f64,
    pub rate_se: f64,
    pub algorithm: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub count: usize,
    pub total_s: f64,
    pub mean_s: f64,
}

impl Timing {
    fn add(&mut self, d: Duration) {
        self.count += 1;
        self.total_s += d.as_secs_f64();
        self.mean_s = self.total_s / self.count as f64;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub runs: usize,
    pub converged: usize,
    pub total_iterations: usize,
    pub max_iterations: usize,
}

impl Convergence {
    fn add(&mut self, converged: bool, iterations: usize) {
        self.runs += 1;
        self.converged += usize::from(converged);
        self.total_iterations += iterations;
        self.max_iterations = self.max_iterations.max(iterations);
    }
}

/// Everything an experiment produces.
#[derive(Debug, Clone, Default)]
pub struct ResultTable {
    pub rows: Vec<CsvRow>,
    /// Empirical CDF of per-thing rates (bit/s/Hz) per algorithm label.
    pub cdfs: BTreeMap<String, Vec<(f64, f64)>>,
    /// Energy efficiencies in bit/J.
    pub ee: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
    pub timings: BTreeMap<String, Timing>,
    pub convergence: BTreeMap<String, Convergence>,
    pub notes: Vec<String>,
    pub elapsed: Duration,
    /// Predictor trained during the run, saved next to the results.
    pub trained_model: Option<Arc<Regressor>>,
}

impl ResultTable {
    fn push_rates(&mut self, algorithm: &str, trial: usize, se: &[f64], bps: &[f64]) {
        for (k, (&s, &b)) in se.iter().zip(bps).enumerate() {
            self.rows.push(CsvRow { thing_id: k, trial, rate_bps: b, rate_se: s, algorithm: algorithm.to_string() });
        }
    }

    fn time(&mut self, name: &str, d: Duration) {
        self.timings.entry(name.to_string()).or_default().add(d);
    }

    fn converge(&mut self, name: &str, converged: bool, iterations: usize) {
        self.convergence.entry(name.to_string()).or_default().add(converged, iterations);
    }

    /// Per-thing spectral efficiencies of one algorithm label, all trials.
    pub fn rates(&self, algorithm: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.algorithm == algorithm).map(|r| r.rate_se).collect()
    }

    fn finish_cdfs(&mut self) -> Result<()> {
        let mut labels: Vec<String> = self.rows.iter().map(|r| r.algorithm.clone()).collect();
        labels.sort();
        labels.dedup();
        for l in labels {
            let cdf = empirical_cdf(&self.rates(&l))?;
            self.cdfs.insert(l, cdf);
        }
        Ok(())
    }
}

/// Right-continuous empirical CDF on the sorted unique values.
pub fn empirical_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Argument("empirical CDF of an empty sample".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Argument("empirical CDF of a sample containing NaN".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = f,
            _ => out.push((*x, f)),
        }
    }
    Ok(out)
}

/// Evaluates a CDF grid from [`empirical_cdf`] at `x`.
pub fn cdf_at(cdf: &[(f64, f64)], x: f64) -> f64 {
    match cdf.partition_point(|p| p.0 <= x) {
        0 => 0.0,
        i => cdf[i - 1].1,
    }
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let (fa, fb) = (empirical_cdf(a)?, empirical_cdf(b)?);
    let d = fa.iter().chain(&fb).map(|&(x, _)| (cdf_at(&fa, x) - cdf_at(&fb, x)).abs()).fold(0.0, f64::max);
    Ok(d)
}

/// Sample quantile with linear interpolation between order statistics;
/// `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) || values.iter().any(|v| v.is_nan()) {
        return Err(Error::Argument("quantile needs a non-empty sample and q in [0, 1]".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(values: &[f64]) -> Result<f64> {
    quantile(values, 0.5)
}

/// Uplink SINR with maximum-ratio combining `v_k = g_hat_k`.
pub fn mr_receiver_sinr(
    draw: &ChannelDraw,
    stats: &EstimationStats,
    alloc: &UlPowerAllocation,
    rho_u: f64,
) -> Result<DVector<f64>> {
    alloc.validate()?;
    let k = alloc.k();
    if draw.g_hat.ncols() != k || draw.g_hat.nrows() != stats.m() {
        return Err(Error::Argument("channel draw does not match the allocation".into()));
    }
    let p = alloc.effective_snr(rho_u);
    let d = noise_plus_error_diag(stats, alloc, rho_u);
    // Gram matrix of the estimates: entry (k, j) = g_hat_k^H g_hat_j
    let gram = draw.g_hat.ad_mul(&draw.g_hat);
    let mut sinr = DVector::zeros(k);
    for kk in 0..k {
        let v = draw.g_hat.column(kk);
        let noise: f64 = v.iter().zip(d.iter()).map(|(c, w)| c.norm_sqr() * w).sum();
        let interf: f64 = (0..k).filter(|&j| j != kk).map(|j| p[j] * gram[(kk, j)].norm_sqr()).sum();
        let num = p[kk] * gram[(kk, kk)].re.powi(2);
        let den = interf + noise;
        sinr[kk] = if num == 0.0 { 0.0 } else { num / den };
    }
    Ok(sinr)
}

/// Options that are not part of the serialized spec.
#[derive(Clone, Default)]
pub struct RunOptions {
    /// Predictor to use instead of loading or training one.
    pub model: Option<Arc<Regressor>>,
}

/// Seed of scenario `index` of network `net` for a spec seed.
fn scenario_seed(seed: u64, net: usize, index: usize) -> u64 {
    substream(seed, ((net as u64) << 32) | index as u64).random()
}

fn draw_rng(scenario_seed: u64) -> SimRng {
    substream(scenario_seed, 1)
}

fn build(net: &NetworkSpec, radio: &RadioConfig, seed: u64) -> Result<(Scenario, EstimationStats)> {
    let scn = net.scenario_config(radio, seed).generate().map_err(|e| e.at_stage("generate"))?;
    let stats = compute_stats(&scn).map_err(|e| e.at_stage("estimate"))?;
    Ok((scn, stats))
}

fn mean_log_rate(acc: &mut [f64], sinr: &DVector<f64>) {
    for (a, s) in acc.iter_mut().zip(sinr.iter()) {
        *a += spectral_efficiency(*s);
    }
}

fn to_bps(se: &[f64], radio: &RadioConfig) -> Vec<f64> {
    se.iter().map(|&r| throughput(r, radio)).collect()
}

fn trial_label(multi: bool, arm: &str, net: &NetworkSpec) -> String {
    if multi {
        format!("{arm}@{}", net.label())
    } else {
        arm.to_string()
    }
}

/// Runs one registered experiment and returns its results. Nothing is
/// written to disk; see [`write_results`].
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<ResultTable> {
    spec.validate().map_err(|e| e.at_stage("config"))?;
    let started = Instant::now();
    let mut table = match spec.id {
        ExperimentId::UlRmAccuracy => run_ul_rm_accuracy(spec)?,
        ExperimentId::UlMaxminCompare => run_ul_maxmin_compare(spec)?,
        ExperimentId::UlTargetEe => run_ul_target_ee(spec)?,
        _ => run_downlink(spec, opts)?,
    };
    table.finish_cdfs().map_err(|e| e.at_stage("aggregate"))?;
    table.elapsed = started.elapsed();
    Ok(table)
}

struct RmTrial {
    rm: Vec<f64>,
    mc: Vec<f64>,
    converged: bool,
    iterations: usize,
    t_rm: Duration,
    t_mc: Duration,
}

fn run_ul_rm_accuracy(spec: &ExperimentSpec) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    let multi = spec.networks.len() > 1;
    let mut all_rm = Vec::new();
    let mut all_mc = Vec::new();
    let mut rel = Vec::new();
    for (ni, net) in spec.networks.iter().enumerate() {
        let trials: Vec<RmTrial> = (0..spec.trials)
            .into_par_iter()
            .map(|t| -> Result<RmTrial> {
                let seed = scenario_seed(spec.seed, ni, t);
                let (scn, stats) = build(net, &spec.radio, seed)?;
                let alloc = UlPowerAllocation::full_power(net.k);
                let t0 = Instant::now();
                let state = rm_fixed_point(&stats, &alloc, scn.rho_u, RM_TOL, RM_MAX_ITER);
                let rm = rm_sinr(&state, &stats, &alloc, scn.rho_u).map_err(|e| e.at_stage("rm"))?;
                let t_rm = t0.elapsed();
                let t0 = Instant::now();
                let mut rng = draw_rng(seed);
                let mut acc = vec![0.0; net.k];
                for _ in 0..spec.draws {
                    let draw = draw_channel(&scn, &stats, &mut rng).map_err(|e| e.at_stage("draw"))?;
                    let s = exact_mmse_sinr(&draw, &stats, &alloc, scn.rho_u).map_err(|e| e.at_stage("mmse"))?;
                    mean_log_rate(&mut acc, &s);
                }
                let mc = acc.iter().map(|a| a / spec.draws as f64).collect();
                Ok(RmTrial {
                    rm: rm.iter().map(|&s| spectral_efficiency(s)).collect(),
                    mc,
                    converged: state.converged,
                    iterations: state.iterations,
                    t_rm,
                    t_mc: t0.elapsed(),
                })
            })
            .collect::<Result<_>>()?;
        let radio = RadioConfig { pilot_len: net.tau, ..spec.radio.clone() };
        for (t, tr) in trials.iter().enumerate() {
            table.push_rates(&trial_label(multi, "mmse-mc", net), t, &tr.mc, &to_bps(&tr.mc, &radio));
            table.push_rates(&trial_label(multi, "rm", net), t, &tr.rm, &to_bps(&tr.rm, &radio));
            table.converge("rm_fixed_point", tr.converged, tr.iterations);
            table.time("rm_sinr", tr.t_rm);
            table.time("mmse_monte_carlo", tr.t_mc);
            for (a, b) in tr.rm.iter().zip(&tr.mc) {
                rel.push((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
            }
            all_rm.extend(&tr.rm);
            all_mc.extend(&tr.mc);
        }
    }
    table.metrics.insert("median_rel_error".into(), median(&rel)?);
    table.metrics.insert("ks_distance".into(), ks_distance(&all_rm, &all_mc)?);
    Ok(table)
}

struct CompareTrial {
    arms: Vec<(&'static str, Vec<f64>)>,
    alg1: Vec<(bool, usize)>,
    alg2: (bool, usize),
    t_alg1: Duration,
    t_alg2: Duration,
}

fn run_ul_maxmin_compare(spec: &ExperimentSpec) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    let multi = spec.networks.len() > 1;
    let mut pooled: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for (ni, net) in spec.networks.iter().enumerate() {
        let trials: Vec<CompareTrial> = (0..spec.trials)
            .into_par_iter()
            .map(|t| -> Result<CompareTrial> {
                let seed = scenario_seed(spec.seed, ni, t);
                let (scn, stats) = build(net, &spec.radio, seed)?;
                let k = net.k;
                let ones = DVector::from_element(k, 1.0);
                let full = UlPowerAllocation::full_power(k);
                let t0 = Instant::now();
                let rm = maxmin_rm(&stats, &ones, &ones, scn.rho_u, DEFAULT_EPS, DEFAULT_MAX_ITER)
                    .map_err(|e| e.at_stage("maxmin_rm"))?;
                let t_alg2 = t0.elapsed();
                let rm_alloc = UlPowerAllocation::with_eta(rm.eta.clone())?;
                let mut rng = draw_rng(seed);
                let (mut full_mmse, mut full_mr, mut a2, mut a1) =
                    (vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]);
                let mut alg1 = Vec::new();
                let mut t_alg1 = Duration::ZERO;
                for _ in 0..spec.draws {
                    let draw = draw_channel(&scn, &stats, &mut rng).map_err(|e| e.at_stage("draw"))?;
                    let mmse = |a: &UlPowerAllocation| {
                        exact_mmse_sinr(&draw, &stats, a, scn.rho_u).map_err(|e| e.at_stage("mmse"))
                    };
                    mean_log_rate(&mut full_mmse, &mmse(&full)?);
                    mean_log_rate(&mut full_mr, &mr_receiver_sinr(&draw, &stats, &full, scn.rho_u)?);
                    mean_log_rate(&mut a2, &mmse(&rm_alloc)?);
                    if spec.ul_exact_maxmin {
                        let t0 = Instant::now();
                        let ex = maxmin_exact(&draw, &stats, &ones, &ones, scn.rho_u, DEFAULT_EPS, DEFAULT_MAX_ITER)
                            .map_err(|e| e.at_stage("maxmin_exact"))?;
                        t_alg1 += t0.elapsed();
                        alg1.push((ex.converged, ex.iterations));
                        mean_log_rate(&mut a1, &mmse(&UlPowerAllocation::with_eta(ex.eta)?)?);
                    }
                }
                let avg = |v: Vec<f64>| v.into_iter().map(|x| x / spec.draws as f64).collect::<Vec<_>>();
                let mut arms = vec![("mmse-full", avg(full_mmse)), ("mr-full", avg(full_mr)), ("mmse-alg2", avg(a2))];
                if spec.ul_exact_maxmin {
                    arms.push(("mmse-alg1", avg(a1)));
                }
                Ok(CompareTrial { arms, alg1, alg2: (rm.converged, rm.iterations), t_alg1, t_alg2 })
            })
            .collect::<Result<_>>()?;
        let radio = RadioConfig { pilot_len: net.tau, ..spec.radio.clone() };
        for (t, tr) in trials.iter().enumerate() {
            for (arm, se) in &tr.arms {
                table.push_rates(&trial_label(multi, arm, net), t, se, &to_bps(se, &radio));
                pooled.entry(arm).or_default().extend(se);
            }
            for &(c, i) in &tr.alg1 {
                table.converge("maxmin_exact", c, i);
            }
            table.converge("maxmin_rm", tr.alg2.0, tr.alg2.1);
            table.time("maxmin_rm", tr.t_alg2);
            if spec.ul_exact_maxmin {
                table.time("maxmin_exact_per_scenario", tr.t_alg1);
            }
        }
    }
    for (arm, v) in &pooled {
        table.metrics.insert(format!("outage5_se_{arm}"), quantile(v, 0.05)?);
        table.metrics.insert(format!("median_se_{arm}"), median(v)?);
    }
    let ratio = table.metrics["outage5_se_mmse-full"] / table.metrics["outage5_se_mr-full"];
    table.metrics.insert("outage5_ratio_mmse_over_mr".into(), ratio);
    Ok(table)
}

struct TargetTrial {
    full_mc: Vec<f64>,
    alg_mc: Vec<f64>,
    full_rm: Vec<f64>,
    alg_rm: Vec<f64>,
    eta: Vec<f64>,
    reweighted: bool,
    unmet: usize,
    converged: bool,
    iterations: usize,
    t_alg: Duration,
}

fn run_ul_target_ee(spec: &ExperimentSpec) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    let multi = spec.networks.len() > 1;
    let mut ee: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut met = (0usize, 0usize);
    for (ni, net) in spec.networks.iter().enumerate() {
        let radio = RadioConfig { pilot_len: net.tau, ..spec.radio.clone() };
        // full-power deterministic rates fix the common target
        let built: Vec<(Scenario, EstimationStats, u64)> = (0..spec.trials)
            .into_par_iter()
            .map(|t| {
                let seed = scenario_seed(spec.seed, ni, t);
                build(net, &spec.radio, seed).map(|(a, b)| (a, b, seed))
            })
            .collect::<Result<_>>()?;
        let full_rm: Vec<Vec<f64>> = built
            .par_iter()
            .map(|(scn, stats, _)| {
                let alloc = UlPowerAllocation::full_power(net.k);
                let state = rm_fixed_point(stats, &alloc, scn.rho_u, RM_TOL, RM_MAX_ITER);
                let s = rm_sinr(&state, stats, &alloc, scn.rho_u).map_err(|e| e.at_stage("rm"))?;
                Ok(s.iter().map(|&x| spectral_efficiency(x)).collect())
            })
            .collect::<Result<_>>()?;
        let pooled: Vec<f64> = full_rm.iter().flatten().copied().collect();
        let target_se = quantile(&pooled, spec.target_percentile / 100.0)?;
        let target_sinr = 2f64.powf(target_se) - 1.0;
        table.metrics.insert(trial_label(multi, "target_se", net), target_se);

        let trials: Vec<TargetTrial> = built
            .par_iter()
            .zip(full_rm)
            .map(|((scn, stats, seed), full_rm)| -> Result<TargetTrial> {
                let k = net.k;
                let ones = DVector::from_element(k, 1.0);
                let t0 = Instant::now();
                let tr = target_rate_rm(
                    stats,
                    &ones,
                    scn.rho_u,
                    target_sinr,
                    DEFAULT_U_GOOD,
                    DEFAULT_U_POOR,
                    DEFAULT_EPS,
                    DEFAULT_MAX_ITER,
                )
                .map_err(|e| e.at_stage("target_rate"))?;
                let t_alg = t0.elapsed();
                let alloc = UlPowerAllocation::with_eta(tr.eta.clone())?;
                let state = rm_fixed_point(stats, &alloc, scn.rho_u, RM_TOL, RM_MAX_ITER);
                let alg_rm = rm_sinr(&state, stats, &alloc, scn.rho_u).map_err(|e| e.at_stage("rm"))?;
                let full = UlPowerAllocation::full_power(k);
                let mut rng = draw_rng(*seed);
                let (mut fm, mut am) = (vec![0.0; k], vec![0.0; k]);
                for _ in 0..spec.draws {
                    let draw = draw_channel(scn, stats, &mut rng).map_err(|e| e.at_stage("draw"))?;
                    mean_log_rate(&mut fm, &exact_mmse_sinr(&draw, stats, &full, scn.rho_u)?);
                    mean_log_rate(&mut am, &exact_mmse_sinr(&draw, stats, &alloc, scn.rho_u)?);
                }
                let avg = |v: Vec<f64>| v.into_iter().map(|x| x / spec.draws as f64).collect::<Vec<_>>();
                Ok(TargetTrial {
                    full_mc: avg(fm),
                    alg_mc: avg(am),
                    full_rm,
                    alg_rm: alg_rm.iter().map(|&s| spectral_efficiency(s)).collect(),
                    eta: tr.eta.iter().copied().collect(),
                    reweighted: tr.reweighted,
                    unmet: tr.unmet.len(),
                    converged: tr.converged,
                    iterations: tr.iterations,
                    t_alg,
                })
            })
            .collect::<Result<_>>()?;

        let p_u_w = radio.p_u / 1000.0;
        for (t, tr) in trials.iter().enumerate() {
            let full_eta = vec![1.0; net.k];
            let arms: [(&'static str, &Vec<f64>, &Vec<f64>); 4] = [
                ("full-mc", &tr.full_mc, &full_eta),
                ("alg4-mc", &tr.alg_mc, &tr.eta),
                ("full-rm", &tr.full_rm, &full_eta),
                ("alg4-rm", &tr.alg_rm, &tr.eta),
            ];
            for (arm, se, eta) in arms {
                let bps = to_bps(se, &radio);
                let total: f64 = eta.iter().sum();
                if total > 0.0 {
                    ee.entry(arm).or_default().push(bps.iter().sum::<f64>() / (p_u_w * total));
                }
                table.push_rates(&trial_label(multi, arm, net), t, se, &bps);
            }
            met.0 += tr.alg_mc.iter().filter(|&&r| r >= target_se * (1.0 - 1e-3)).count();
            met.1 += net.k;
            table.converge("target_rate_rm", tr.converged, tr.iterations);
            table.time("target_rate_rm", tr.t_alg);
            *table.metrics.entry("reweighted_scenarios".into()).or_insert(0.0) += f64::from(u8::from(tr.reweighted));
            *table.metrics.entry("unmet_things".into()).or_insert(0.0) += tr.unmet as f64;
        }
    }
    for (arm, v) in &ee {
        table.ee.insert(arm.to_string(), v.iter().sum::<f64>() / v.len() as f64);
    }
    let ratio = |a: &str, b: &str| table.ee.get(a).zip(table.ee.get(b)).map(|(x, y)| x / y);
    if let Some(r) = ratio("alg4-mc", "full-mc") {
        table.metrics.insert("ee_ratio_mc".into(), r);
    }
    if let Some(r) = ratio("alg4-rm", "full-rm") {
        table.metrics.insert("ee_ratio_rm".into(), r);
    }
    table.metrics.insert("target_met_fraction_mc".into(), met.0 as f64 / met.1.max(1) as f64);
    Ok(table)
}

fn obtain_model(spec: &ExperimentSpec, opts: &RunOptions, table: &mut ResultTable) -> Result<Arc<Regressor>> {
    if let Some(m) = &opts.model {
        table.notes.push("predictor supplied by caller".into());
        return Ok(m.clone());
    }
    if let Some(path) = &spec.model_path {
        table.notes.push(format!("predictor loaded from {}", path.display()));
        return Ok(Arc::new(Regressor::load(path).map_err(|e| e.at_stage("load_model"))?));
    }
    let train = spec.train.as_ref().ok_or_else(|| Error::Config("no predictor: set train or model_path".into()))?;
    let (reg, _) = train_predictor(train, spec.radio.clone(), spec.seed, spec.dl_tol, Some(table))?;
    let reg = Arc::new(reg);
    table.trained_model = Some(reg.clone());
    Ok(reg)
}

/// Dataset generation plus training as configured by `train`. Training
/// scenarios use seeds disjoint from evaluation scenarios of the same spec.
pub fn train_predictor(
    train: &TrainSpec,
    radio: RadioConfig,
    seed: u64,
    dl_tol: f64,
    table: Option<&mut ResultTable>,
) -> Result<(Regressor, crate::regressor::TrainReport)> {
    let specs: Vec<ScenarioConfig> = train
        .networks
        .iter()
        .enumerate()
        .flat_map(|(ni, net)| {
            let radio = &radio;
            (0..train.scenarios).map(move |t| net.scenario_config(radio, scenario_seed(seed ^ TRAIN_SALT, ni, t)))
        })
        .collect();
    let t0 = Instant::now();
    let ds = build_dataset(&specs, train.features, dl_tol, seed).map_err(|e| e.at_stage("dataset"))?;
    let t_ds = t0.elapsed();
    if ds.records.is_empty() {
        return Err(Error::Training("every training scenario failed to solve".into()).at_stage("dataset"));
    }
    let lm = LmParams { seed: train.lm.seed ^ seed, ..train.lm.clone() };
    let (reg, rep) = train_lm(&ds.records, train.features, &train.net, &lm).map_err(|e| e.at_stage("train"))?;
    if let Some(table) = table {
        table.time("dataset_generation", t_ds);
        table.time("training", rep.elapsed);
        for &d in &ds.solve_times {
            table.time("train_maxmin_dl_full", d);
        }
        table.metrics.insert("train_records".into(), ds.records.len() as f64);
        table.metrics.insert("train_skipped_scenarios".into(), ds.skipped as f64);
        table.metrics.insert("train_best_val_mse".into(), rep.best_val_mse);
        table.converge("train_lm", rep.stop != crate::regressor::StopReason::MaxEpochs, rep.epochs);
        table.notes.push(format!("training stopped: {:?}", rep.stop));
    }
    Ok((reg, rep))
}

const TRAIN_SALT: u64 = 0x7472_6169_6e00_0000;

/// Per-arm outcome of one downlink scenario.
struct DlTrial {
    arms: Vec<(DlArm, Vec<f64>, Vec<f64>, f64)>,
    t_full: Option<Duration>,
    t_nn: Option<Duration>,
    full_solves: Option<(bool, usize)>,
    mae: Option<f64>,
    orth_ratio: Option<f64>,
}

fn run_dl_trial(
    spec: &ExperimentSpec,
    net: &NetworkSpec,
    seed: u64,
    model: Option<&Regressor>,
) -> Result<DlTrial> {
    let (scn, stats) = build(net, &spec.radio, seed)?;
    let mk = net.m * net.k;
    let want = |a: DlArm| spec.dl_arms.contains(&a);
    let full_ok = mk <= spec.full_max_mk;
    let given_ok = mk <= spec.given_p_max_mk;
    let arms_active: Vec<DlArm> = spec
        .dl_arms
        .iter()
        .copied()
        .filter(|a| (full_ok || !a.needs_full()) && (given_ok || !a.needs_given_p()))
        .collect();

    let mut out = DlTrial { arms: Vec::new(), t_full: None, t_nn: None, full_solves: None, mae: None, orth_ratio: None };
    let full = if arms_active.iter().any(|a| a.needs_full()) {
        let t0 = Instant::now();
        let sol = maxmin_dl_full(&scn, &stats, spec.dl_tol).map_err(|e| e.at_stage("maxmin_dl_full"))?;
        out.t_full = Some(t0.elapsed());
        out.full_solves = Some((sol.polished, sol.solves));
        Some(sol)
    } else {
        None
    };
    let p_nn = if arms_active.iter().any(|a| a.needs_model()) {
        let reg = model.ok_or_else(|| Error::Config("predictor missing".into()))?;
        let t0 = Instant::now();
        let p = reg.predict_powers(&scn.beta).map_err(|e| e.at_stage("predict"))?;
        let nn_orth = if want(DlArm::NnOrth) && given_ok {
            Some(maxmin_dl_given_p(&stats, &p, scn.rho_d).map_err(|e| e.at_stage("maxmin_dl_given_p"))?)
        } else {
            None
        };
        out.t_nn = Some(t0.elapsed());
        Some((p, nn_orth))
    } else {
        None
    };
    if let (Some(f), Some((p, _))) = (&full, &p_nn) {
        out.mae = Some((p - &f.alloc.p).abs().mean());
    }

    let ones = DVector::from_element(net.m, 1.0);
    let mut allocs: Vec<(DlArm, DlPowerAllocation)> = Vec::new();
    for arm in arms_active {
        let alloc = match arm {
            DlArm::MaxminOpt => full.as_ref().unwrap().alloc.clone(),
            DlArm::UniformFull => uniform_power(&stats, &ones)?,
            DlArm::UniformOpt => uniform_power(&stats, &full.as_ref().unwrap().alloc.p)?,
            DlArm::UniformNn => uniform_power(&stats, &p_nn.as_ref().unwrap().0)?,
            DlArm::NnOrth => p_nn.as_ref().unwrap().1.as_ref().unwrap().alloc.clone(),
            DlArm::OptOrth => {
                let f = full.as_ref().unwrap();
                let g = maxmin_dl_given_p(&stats, &f.alloc.p, scn.rho_d).map_err(|e| e.at_stage("maxmin_dl_given_p"))?;
                out.orth_ratio = Some(g.sinr_orth.min() / f.min_sinr);
                g.alloc
            }
        };
        allocs.push((arm, alloc));
    }
    let refs: Vec<&DlPowerAllocation> = allocs.iter().map(|(_, a)| a).collect();
    let sinrs = dl_sinr_closed_form_many(&scn, &stats, &refs).map_err(|e| e.at_stage("evaluate"))?;
    for ((arm, alloc), sinr) in allocs.iter().zip(sinrs) {
        let p: Vec<f64> = alloc.p.iter().copied().collect();
        let s: Vec<f64> = sinr.iter().copied().collect();
        let rates = dl_rate_and_ee(&s, &p, scn.radio.p_d / 1000.0, &scn.radio).map_err(|e| e.at_stage("evaluate"))?;
        out.arms.push((*arm, rates.se, rates.rate_bps, rates.ee));
    }
    Ok(out)
}

fn run_downlink(spec: &ExperimentSpec, opts: &RunOptions) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    let model = if spec.dl_arms.iter().any(|a| a.needs_model()) {
        Some(obtain_model(spec, opts, &mut table)?)
    } else {
        None
    };
    let multi = spec.networks.len() > 1;
    for (ni, net) in spec.networks.iter().enumerate() {
        let mk = net.m * net.k;
        for arm in &spec.dl_arms {
            if (arm.needs_full() && mk > spec.full_max_mk) || (arm.needs_given_p() && mk > spec.given_p_max_mk) {
                table.notes.push(format!("{} skipped on {}: M*K = {mk} above the solver limit", arm.name(), net.label()));
            }
        }
        // large networks parallelize inside the SINR evaluation instead
        let trials: Vec<DlTrial> = (0..spec.trials)
            .into_par_iter()
            .with_max_len(1)
            .map(|t| run_dl_trial(spec, net, scenario_seed(spec.seed, ni, t), model.as_deref()))
            .collect::<Result<_>>()?;
        let mut per_arm: BTreeMap<DlArm, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let (mut t_full, mut t_nn) = (Duration::ZERO, Duration::ZERO);
        let mut paired = 0;
        let mut maes = Vec::new();
        let mut orth = Vec::new();
        for (t, tr) in trials.iter().enumerate() {
            for (arm, se, bps, ee) in &tr.arms {
                table.push_rates(&trial_label(multi, arm.name(), net), t, se, bps);
                let e = per_arm.entry(*arm).or_default();
                e.0.extend(se);
                e.1.push(*ee);
                e.2.push(se.iter().copied().fold(f64::INFINITY, f64::min));
            }
            if let Some(d) = tr.t_full {
                table.time(&trial_label(multi, "maxmin_dl_full", net), d);
            }
            if let Some(d) = tr.t_nn {
                table.time(&trial_label(multi, "nn_pipeline", net), d);
            }
            if let (Some(a), Some(b)) = (tr.t_full, tr.t_nn) {
                t_full += a;
                t_nn += b;
                paired += 1;
            }
            if let Some((polished, solves)) = tr.full_solves {
                table.converge(&trial_label(multi, "maxmin_dl_full", net), polished, solves);
            }
            maes.extend(tr.mae);
            orth.extend(tr.orth_ratio);
        }
        let key = |s: &str| trial_label(multi, s, net);
        for (arm, (se, ee, mins)) in &per_arm {
            table.metrics.insert(key(&format!("median_se_{}", arm.name())), median(se)?);
            table.metrics.insert(key(&format!("mean_min_se_{}", arm.name())), mins.iter().sum::<f64>() / mins.len() as f64);
            table.ee.insert(key(arm.name()), ee.iter().sum::<f64>() / ee.len() as f64);
        }
        if paired > 0 && t_nn > Duration::ZERO {
            table.metrics.insert(key("speedup_full_over_nn"), t_full.as_secs_f64() / t_nn.as_secs_f64());
        }
        if !maes.is_empty() {
            table.metrics.insert(key("mean_abs_p_error"), maes.iter().sum::<f64>() / maes.len() as f64);
        }
        if !orth.is_empty() {
            table.metrics.insert(key("min_orth_ratio_opt_given_p"), orth.iter().copied().fold(f64::INFINITY, f64::min));
        }
        if let (Some(a), Some(b)) = (table.ee.get(&key("uniform-nn")), table.ee.get(&key("uniform-full"))) {
            table.metrics.insert(key("ee_ratio_nn_over_full"), a / b);
        }
        if let (Some(a), Some(b)) =
            (table.metrics.get(&key("median_se_uniform-nn")), table.metrics.get(&key("median_se_uniform-opt")))
        {
            table.metrics.insert(key("median_rel_gap_nn_vs_opt"), (a - b).abs() / b);
        }
    }
    if let Some(m) = &model {
        table.metrics.insert("model_params".into(), m.n_params() as f64);
    }
    Ok(table)
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    version: &'a str,
    experiment: &'a str,
    seed: u64,
    elapsed_s: f64,
    ee_bits_per_joule: &'a BTreeMap<String, f64>,
    metrics: &'a BTreeMap<String, f64>,
    timings: &'a BTreeMap<String, Timing>,
    convergence: &'a BTreeMap<String, Convergence>,
    notes: &'a [String],
    config: &'a ExperimentSpec,
}

/// Paths of the files written for one run.
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub csv: PathBuf,
    pub cdf: PathBuf,
    pub summary: PathBuf,
    pub config: PathBuf,
    /// Written only when the run trained a predictor.
    pub model: PathBuf,
}

pub fn output_files(spec: &ExperimentSpec) -> OutputFiles {
    let base = |suffix: &str| spec.out.join(format!("{}{suffix}", spec.id));
    OutputFiles {
        csv: base(".csv"),
        cdf: base("_cdf.csv"),
        summary: base("_summary.json"),
        config: base("_config.toml"),
        model: base("_model.json"),
    }
}

/// Writes the rate CSV, CDF grid, summary and resolved config under
/// `spec.out`.
pub fn write_results(spec: &ExperimentSpec, table: &ResultTable) -> Result<OutputFiles> {
    let files = output_files(spec);
    let write = || -> Result<()> {
        std::fs::create_dir_all(&spec.out)?;
        write_rate_csv(&files.csv, &table.rows)?;
        let mut w = csv::Writer::from_path(&files.cdf).map_err(csv_err)?;
        w.write_record(["algorithm", "rate_se", "cdf"]).map_err(csv_err)?;
        for (label, grid) in &table.cdfs {
            for (x, f) in grid {
                w.write_record([label.as_str(), &x.to_string(), &f.to_string()]).map_err(csv_err)?;
            }
        }
        w.flush()?;
        let summary = Summary {
            version: VERSION,
            experiment: spec.id.name(),
            seed: spec.seed,
            elapsed_s: table.elapsed.as_secs_f64(),
            ee_bits_per_joule: &table.ee,
            metrics: &table.metrics,
            timings: &table.timings,
            convergence: &table.convergence,
            notes: &table.notes,
            config: spec,
        };
        std::fs::write(&files.summary, serde_json::to_string_pretty(&summary)?)?;
        std::fs::write(&files.config, spec.to_toml_string()?)?;
        if let Some(reg) = &table.trained_model {
            reg.save(&files.model)?;
        }
        Ok(())
    };
    write().map_err(|e| e.at_stage("write"))?;
    Ok(files)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn write_rate_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(CSV_HEADER).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a rate CSV written by [`write_rate_csv`].
pub fn read_rate_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn cdf_examples() {
        assert_eq!(empirical_cdf(&[5.0]).unwrap(), vec![(5.0, 1.0)]);
        let c = empirical_cdf(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cdf_at(&c, 2.5), 0.5);
        assert_eq!(cdf_at(&c, 0.5), 0.0);
        assert_eq!(cdf_at(&c, 4.0), 1.0);
        let x = [3.0, 1.0, 2.0, 2.0];
        let doubled: Vec<f64> = x.iter().chain(&x).copied().collect();
        assert_eq!(empirical_cdf(&x).unwrap(), empirical_cdf(&doubled).unwrap());
        assert!(empirical_cdf(&[]).is_err());
    }

    #[test]
    fn ks_and_quantiles() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_distance(&a, &[10.0, 11.0]).unwrap(), 1.0);
        assert_eq!(ks_distance(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.5);
        assert_eq!(median(&a).unwrap(), 2.5);
        assert_eq!(quantile(&a, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&a, 1.0).unwrap(), 4.0);
        assert!(quantile(&a, 1.5).is_err());
    }

    #[test]
    fn registry_round_trips() {
        for id in ExperimentId::ALL {
            assert_eq!(id.name().parse::<ExperimentId>().unwrap(), id);
            for p in [Preset::Desk, Preset::Paper] {
                let s = ExperimentSpec::preset(id, p);
                s.validate().unwrap();
                let back: ExperimentSpec = toml::from_str(&s.to_toml_string().unwrap()).unwrap();
                assert_eq!(back, s);
            }
        }
        assert!("ul-nothing".parse::<ExperimentId>().is_err());
    }

    #[test]
    fn overlay_merges_nested_tables() {
        let text = "trials = 3\n[radio]\np_u = 10.0\n";
        let s = ExperimentSpec::resolve(ExperimentId::UlTargetEe, Preset::Desk, Some(text)).unwrap();
        assert_eq!(s.trials, 3);
        assert_eq!(s.radio.p_u, 10.0);
        assert_eq!(s.radio.p_d, RadioConfig::default().p_d);
        assert!(ExperimentSpec::resolve(ExperimentId::UlTargetEe, Preset::Desk, Some("trials = 0")).is_err());
        assert!(ExperimentSpec::resolve(ExperimentId::UlTargetEe, Preset::Desk, Some("bogus = 1")).is_err());
        let wrong = "id = \"dl-ee-large\"";
        assert!(ExperimentSpec::resolve(ExperimentId::UlTargetEe, Preset::Desk, Some(wrong)).is_err());
    }

    fn small_ul(id: ExperimentId) -> ExperimentSpec {
        let mut s = ExperimentSpec::preset(id, Preset::Desk);
        s.networks = vec![NetworkSpec::new(16, 4, 4, 0.04)];
        s.trials = 2;
        s.draws = 5;
        s
    }

    #[test]
    fn mr_and_mmse_coincide_for_one_antenna_one_thing() {
        let net = NetworkSpec::new(1, 1, 1, 0.01);
        let (scn, stats) = build(&net, &RadioConfig::default(), 4).unwrap();
        let alloc = UlPowerAllocation::full_power(1);
        let mut rng = seeded(1);
        for _ in 0..5 {
            let d = draw_channel(&scn, &stats, &mut rng).unwrap();
            let a = mr_receiver_sinr(&d, &stats, &alloc, scn.rho_u).unwrap()[0];
            let b = exact_mmse_sinr(&d, &stats, &alloc, scn.rho_u).unwrap()[0];
            assert!((a - b).abs() <= 1e-9 * b, "{a} {b}");
        }
    }

    #[test]
    fn mmse_dominates_mr() {
        let net = NetworkSpec::new(12, 5, 3, 0.02);
        let (scn, stats) = build(&net, &RadioConfig::default(), 8).unwrap();
        let alloc = UlPowerAllocation::with_eta(DVector::from_vec(vec![1.0, 0.4, 0.7, 0.1, 0.9])).unwrap();
        let mut rng = seeded(2);
        for _ in 0..20 {
            let d = draw_channel(&scn, &stats, &mut rng).unwrap();
            let mr = mr_receiver_sinr(&d, &stats, &alloc, scn.rho_u).unwrap();
            let mmse = exact_mmse_sinr(&d, &stats, &alloc, scn.rho_u).unwrap();
            for k in 0..5 {
                assert!(mmse[k] >= mr[k] * (1.0 - 1e-9));
            }
        }
    }

    #[test]
    fn uplink_experiments_run_and_repeat() {
        let dir = tempfile::tempdir().unwrap();
        for id in [ExperimentId::UlRmAccuracy, ExperimentId::UlMaxminCompare, ExperimentId::UlTargetEe] {
            let mut s = small_ul(id);
            s.out = dir.path().join(id.name());
            let a = run_experiment(&s, &RunOptions::default()).unwrap();
            let b = run_experiment(&s, &RunOptions::default()).unwrap();
            assert_eq!(a.rows, b.rows);
            assert!(!a.rows.is_empty());
            for grid in a.cdfs.values() {
                assert!(grid.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
                assert_eq!(grid.last().unwrap().1, 1.0);
            }
            let files = write_results(&s, &a).unwrap();
            let text = std::fs::read_to_string(&files.csv).unwrap();
            assert!(text.starts_with("thing_id,trial,rate_bps,rate_se,algorithm\n"));
            assert_eq!(read_rate_csv(&files.csv).unwrap(), a.rows);
            let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&files.summary).unwrap()).unwrap();
            assert_eq!(summary["version"], VERSION);
            assert_eq!(summary["config"]["id"], id.name());
        }
    }

    #[test]
    fn downlink_experiment_with_supplied_model() {
        let mut s = ExperimentSpec::preset(ExperimentId::DlDensityTransfer, Preset::Desk);
        s.networks = vec![NetworkSpec::new(8, 2, 2, 0.004), NetworkSpec::new(32, 8, 8, 0.016)];
        s.full_max_mk = 16;
        s.trials = 2;
        let reg = Regressor::init(FeatureSpec::default(), &NetSpec::default(), &mut seeded(0)).unwrap();
        let opts = RunOptions { model: Some(Arc::new(reg)) };
        let t = run_experiment(&s, &opts).unwrap();
        let labels: Vec<String> = t.cdfs.keys().cloned().collect();
        assert!(labels.contains(&"maxmin-opt@M8K2A0.004".to_string()));
        assert!(labels.contains(&"uniform-nn@M32K8A0.016".to_string()));
        assert!(!labels.contains(&"maxmin-opt@M32K8A0.016".to_string()));
        assert!(t.notes.iter().any(|n| n.contains("skipped")));
        assert!(t.metrics.contains_key("speedup_full_over_nn@M8K2A0.004"));
        let t2 = run_experiment(&s, &opts).unwrap();
        assert_eq!(t.rows, t2.rows);
    }

    #[test]
    fn downlink_without_model_is_a_config_error() {
        let mut s = ExperimentSpec::preset(ExperimentId::DlEeLarge, Preset::Desk);
        s.train = None;
        s.networks = vec![NetworkSpec::new(8, 2, 2, 0.004)];
        let err = run_experiment(&s, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
