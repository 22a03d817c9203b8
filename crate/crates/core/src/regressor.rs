//! Per-AP downlink power predictor: a small feed-forward network trained with
//! Levenberg-Marquardt on solved max-min scenarios.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dl_power::maxmin_dl_full;
use crate::error::{Error, Result};
use crate::estimation::compute_stats;
use crate::netgen::ScenarioConfig;
use crate::rng::seeded;

/// Bumped whenever the serialized layout changes.
pub const FORMAT_VERSION: u32 = 1;

/// How a row of large-scale fading turns into network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    /// Strongest gains kept individually.
    pub n_top: usize,
    /// Stand-in (dB) for missing gains when `K < n_top`.
    pub floor_db: f64,
    /// Append the AP's share of each thing's total gain, summed over things.
    #[serde(default)]
    pub share: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { n_top: 8, floor_db: -200.0, share: true }
    }
}

impl FeatureSpec {
    pub fn len(&self) -> usize {
        self.n_top + 1 + usize::from(self.share)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Top `n_top` gains in dB (descending), the dB sum of the rest and, with
    /// `share`, `sum_k beta_mk / col_sums_k` in dB.
    pub fn features(&self, beta_row: &[f64], col_sums: &[f64]) -> Vec<f64> {
        let mut sorted: Vec<f64> = beta_row.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let db = |x: f64| if x > 0.0 { (10.0 * x.log10()).max(self.floor_db) } else { self.floor_db };
        let mut out: Vec<f64> = (0..self.n_top).map(|i| sorted.get(i).map_or(self.floor_db, |&b| db(b))).collect();
        let rest: f64 = sorted.iter().skip(self.n_top).sum();
        out.push(db(rest));
        if self.share {
            let share: f64 = beta_row.iter().zip(col_sums).filter(|(_, &c)| c > 0.0).map(|(b, c)| b / c).sum();
            out.push(db(share));
        }
        out
    }

    /// Feature rows for every AP of a gain matrix (`M x K`).
    pub fn feature_rows(&self, beta: &DMatrix<f64>) -> Vec<Vec<f64>> {
        let col_sums: Vec<f64> = beta.column_iter().map(|c| c.sum()).collect();
        (0..beta.nrows())
            .into_par_iter()
            .map(|m| {
                let row: Vec<f64> = beta.row(m).iter().copied().collect();
                self.features(&row, &col_sums)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }
}

/// Network shape. Output is always a single unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec { hidden: vec![20], hidden_activation: Activation::Tanh, output_activation: Activation::Sigmoid }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmParams {
    pub lambda0: f64,
    pub lambda_inc: f64,
    pub lambda_dec: f64,
    /// Damping ceiling; training stops when no step below it reduces the MSE.
    pub lambda_max: f64,
    pub max_epochs: usize,
    /// Fraction of records held out for early stopping.
    pub val_fraction: f64,
    /// Accepted steps without a new best validation MSE before stopping.
    pub patience: usize,
    pub mse_goal: f64,
    pub min_grad: f64,
    pub seed: u64,
}

impl Default for LmParams {
    fn default() -> Self {
        LmParams {
            lambda0: 1e-3,
            lambda_inc: 10.0,
            lambda_dec: 0.1,
            lambda_max: 1e10,
            max_epochs: 300,
            val_fraction: 0.1,
            patience: 10,
            mse_goal: 0.0,
            min_grad: 1e-12,
            seed: 0,
        }
    }
}

impl LmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda0 > 0.0
            && self.lambda_inc > 1.0
            && self.lambda_dec > 0.0
            && self.lambda_dec < 1.0
            && self.lambda_max >= self.lambda0
            && (0.0..1.0).contains(&self.val_fraction)
            && self.patience >= 1
            && self.mse_goal >= 0.0
            && self.min_grad >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad training parameters: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub features: Vec<f64>,
    /// Normalized AP power in `[0, 1]`.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Trained predictor. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regressor {
    pub format_version: u32,
    pub features: FeatureSpec,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub layers: Vec<Layer>,
}

impl Regressor {
    /// Random weights (uniform, scaled by fan-in) and identity normalization.
    pub fn init(features: FeatureSpec, spec: &NetSpec, rng: &mut impl Rng) -> Result<Regressor> {
        if spec.hidden.contains(&0) {
            return Err(Error::Config("hidden layers need at least one unit".into()));
        }
        let n_in = features.len();
        let mut sizes = vec![n_in];
        sizes.extend(&spec.hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (inputs, outputs) = (w[0], w[1]);
                let bound = (3.0 / inputs as f64).sqrt();
                let mut draw = || (2.0 * rng.random::<f64>() - 1.0) * bound;
                let weights = (0..inputs * outputs).map(|_| draw()).collect();
                let bias = (0..outputs).map(|_| draw()).collect();
                let activation = if i + 2 == sizes.len() { spec.output_activation } else { spec.hidden_activation };
                Layer { inputs, outputs, activation, weights, bias }
            })
            .collect();
        Ok(Regressor {
            format_version: FORMAT_VERSION,
            features,
            input_mean: vec![0.0; n_in],
            input_scale: vec![1.0; n_in],
            layers,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.input_mean.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.n_inputs()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    /// Flat parameter vector: per layer, weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::Argument(format!("expected {} parameters, got {}", self.n_params(), theta.len())));
        }
        let mut it = theta.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|w| *w = it.next().unwrap());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported model format version {}", self.format_version)));
        }
        let n_in = self.features.len();
        if self.input_mean.len() != n_in || self.input_scale.len() != n_in {
            return Err(Error::Config("normalization length does not match the feature spec".into()));
        }
        let mut width = n_in;
        for l in &self.layers {
            if l.inputs != width || l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Config("inconsistent layer shapes".into()));
            }
            width = l.outputs;
        }
        if self.layers.is_empty() || width != 1 {
            return Err(Error::Config("network must end in a single output".into()));
        }
        let finite = self.params().iter().chain(&self.input_mean).chain(&self.input_scale).all(|v| v.is_finite());
        if !finite || self.input_scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("non-finite weights or non-positive scales".into()));
        }
        Ok(())
    }

    fn normalize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.input_mean).zip(&self.input_scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    /// Activations of every layer, input first.
    fn forward_all(&self, f: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![self.normalize(f)];
        for l in &self.layers {
            let a = acts.last().unwrap();
            let next = (0..l.outputs)
                .map(|o| {
                    let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    l.activation.apply(row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>() + l.bias[o])
                })
                .collect();
            acts.push(next);
        }
        acts
    }

    /// Unclamped network output.
    pub fn predict_raw(&self, f: &[f64]) -> Result<f64> {
        self.check_len(f)?;
        Ok(self.forward_all(f).last().unwrap()[0])
    }

    /// Predicted normalized power, clamped to `[0, 1]`.
    pub fn predict(&self, f: &[f64]) -> Result<f64> {
        Ok(self.predict_raw(f)?.clamp(0.0, 1.0))
    }

    /// Predicted powers for every AP of a gain matrix (`M x K`).
    pub fn predict_powers(&self, beta: &DMatrix<f64>) -> Result<DVector<f64>> {
        let rows: Vec<f64> =
            self.features.feature_rows(beta).par_iter().map(|f| self.predict(f)).collect::<Result<_>>()?;
        Ok(DVector::from_vec(rows))
    }

    fn check_len(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.n_inputs() {
            return Err(Error::Argument(format!("feature length {} but model expects {}", f.len(), self.n_inputs())));
        }
        Ok(())
    }

    /// Output and its gradient with respect to the flat parameters.
    pub fn output_gradient(&self, f: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_len(f)?;
        let acts = self.forward_all(f);
        let mut grad = vec![0.0; self.n_params()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weights.len() + l.bias.len();
        }
        let out = acts.last().unwrap()[0];
        let last = self.layers.last().unwrap();
        let mut delta = vec![last.activation.slope(out)];
        for (li, l) in self.layers.iter().enumerate().rev() {
            let a_in = &acts[li];
            let base = offsets[li];
            for o in 0..l.outputs {
                for i in 0..l.inputs {
                    grad[base + o * l.inputs + i] = delta[o] * a_in[i];
                }
                grad[base + l.weights.len() + o] = delta[o];
            }
            if li > 0 {
                let act = self.layers[li - 1].activation;
                delta = (0..l.inputs)
                    .map(|i| {
                        let back: f64 = (0..l.outputs).map(|o| l.weights[o * l.inputs + i] * delta[o]).sum();
                        back * act.slope(a_in[i])
                    })
                    .collect();
            }
        }
        Ok((out, grad))
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Regressor> {
        let reg: Regressor = serde_json::from_str(text)?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: &Path) -> Result<Regressor> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Max discrepancy between the analytic parameter gradient of the output and
/// central differences, relative to the largest analytic entry.
pub fn jacobian_fd_check(reg: &Regressor, sample: &[f64], eps: f64) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Argument("finite-difference step must lie in [1e-7, 1e-4]".into()));
    }
    let (_, analytic) = reg.output_gradient(sample)?;
    let theta = reg.params();
    let mut probe = reg.clone();
    let mut worst: f64 = 0.0;
    for j in 0..theta.len() {
        let mut t = theta.clone();
        t[j] = theta[j] + eps;
        probe.set_params(&t)?;
        let up = probe.predict_raw(sample)?;
        t[j] = theta[j] - eps;
        probe.set_params(&t)?;
        let down = probe.predict_raw(sample)?;
        worst = worst.max((analytic[j] - (up - down) / (2.0 * eps)).abs());
    }
    let scale = analytic.iter().fold(0.0_f64, |a, &g| a.max(g.abs())).max(f64::EPSILON);
    Ok(worst / scale)
}

/// Residuals `f(x) - y` and their Jacobian (`N x W`).
fn residuals_and_jacobian(reg: &Regressor, data: &[TrainRecord]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let rows: Vec<(f64, Vec<f64>)> = data
        .par_iter()
        .map(|r| reg.output_gradient(&r.features).map(|(y, g)| (y - r.target, g)))
        .collect::<Result<_>>()?;
    let w = reg.n_params();
    let res = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.0));
    let jac = DMatrix::from_fn(rows.len(), w, |i, j| rows[i].1[j]);
    Ok((res, jac))
}

pub fn mse(reg: &Regressor, data: &[TrainRecord]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("empty data set".into()));
    }
    let s: f64 = data
        .par_iter()
        .map(|r| reg.predict_raw(&r.features).map(|y| (y - r.target).powi(2)))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(s / data.len() as f64)
}

/// Mean absolute error of the clamped prediction.
pub fn mean_abs_error(reg: &Regressor, data: &[TrainRecord]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("empty data set".into()));
    }
    let s: f64 = data.iter().map(|r| reg.predict(&r.features).map(|y| (y - r.target).abs())).sum::<Result<f64>>()?;
    Ok(s / data.len() as f64)
}

/// One damped step `-(J^T J + lambda I)^{-1} J^T r`, or `None` when the
/// damped normal matrix is not positive definite.
fn damped_step(jtj: &DMatrix<f64>, jtr: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut a = jtj.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let step = a.cholesky()?.solve(jtr);
    step.iter().all(|v| v.is_finite()).then(|| -step)
}

/// Levenberg-Marquardt step at damping `lambda` for the current weights.
pub fn lm_step(reg: &Regressor, data: &[TrainRecord], lambda: f64) -> Result<DVector<f64>> {
    let (r, j) = residuals_and_jacobian(reg, data)?;
    damped_step(&j.tr_mul(&j), &j.tr_mul(&r), lambda)
        .ok_or_else(|| Error::Training("damped normal equations are singular".into()))
}

/// Gradient of half the summed squared residuals, `J^T r`.
pub fn loss_gradient(reg: &Regressor, data: &[TrainRecord]) -> Result<DVector<f64>> {
    let (r, j) = residuals_and_jacobian(reg, data)?;
    Ok(j.tr_mul(&r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    ValidationPatience,
    DampingCeiling,
    MseGoal,
    SmallGradient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training MSE after each accepted step, starting with the initial value.
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub best_val_mse: f64,
    /// Accepted step whose weights were returned (0 = initial weights).
    pub best_step: usize,
    pub epochs: usize,
    pub stop: StopReason,
    pub n_train: usize,
    pub n_val: usize,
    pub elapsed: Duration,
}

/// Trains a fresh network on `data`. Records are split by `params.seed`
/// into training and validation parts; the weights with the lowest
/// validation MSE are returned.
pub fn train_lm(
    data: &[TrainRecord],
    features: FeatureSpec,
    spec: &NetSpec,
    params: &LmParams,
) -> Result<(Regressor, TrainReport)> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::Training("empty data set".into()));
    }
    if let Some(bad) = data.iter().find(|r| r.features.len() != features.len() || !r.target.is_finite()) {
        return Err(Error::Training(format!("malformed record {bad:?}")));
    }
    let started = Instant::now();
    let mut rng = seeded(params.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if data.len() >= 2 { (data.len() as f64 * params.val_fraction).round() as usize } else { 0 };
    let val: Vec<TrainRecord> = order[..n_val].iter().map(|&i| data[i].clone()).collect();
    let train: Vec<TrainRecord> = order[n_val..].iter().map(|&i| data[i].clone()).collect();

    let mut reg = Regressor::init(features, spec, &mut rng)?;
    let n_in = features.len();
    for i in 0..n_in {
        let col: Vec<f64> = train.iter().map(|r| r.features[i]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
        reg.input_mean[i] = mean;
        reg.input_scale[i] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }

    let val_of = |r: &Regressor| if val.is_empty() { Ok(f64::NAN) } else { mse(r, &val) };
    let mut theta = reg.params();
    let mut cur = mse(&reg, &train)?;
    let mut train_mse = vec![cur];
    let mut val_mse = vec![val_of(&reg)?];
    let mut best = (val_mse[0], theta.clone(), 0usize);
    let mut since_best = 0;
    let mut lambda = params.lambda0;
    let mut epochs = 0;
    let stop = loop {
        if epochs >= params.max_epochs {
            break StopReason::MaxEpochs;
        }
        if cur <= params.mse_goal {
            break StopReason::MseGoal;
        }
        epochs += 1;
        let (r, j) = residuals_and_jacobian(&reg, &train)?;
        let jtr = j.tr_mul(&r);
        if jtr.amax() / train.len() as f64 <= params.min_grad {
            break StopReason::SmallGradient;
        }
        let jtj = j.tr_mul(&j);
        let mut accepted = false;
        let mut any_solved = false;
        while lambda <= params.lambda_max {
            if let Some(step) = damped_step(&jtj, &jtr, lambda) {
                any_solved = true;
                let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                let mut cand = reg.clone();
                cand.set_params(&trial)?;
                let m = mse(&cand, &train)?;
                if m < cur {
                    reg = cand;
                    theta = trial;
                    cur = m;
                    lambda = (lambda * params.lambda_dec).max(f64::MIN_POSITIVE);
                    accepted = true;
                    break;
                }
            }
            lambda *= params.lambda_inc;
        }
        if !accepted {
            if !any_solved {
                return Err(Error::Training("normal equations singular up to the damping ceiling".into()));
            }
            break StopReason::DampingCeiling;
        }
        train_mse.push(cur);
        let v = val_of(&reg)?;
        val_mse.push(v);
        if val.is_empty() || v < best.0 {
            best = (v, theta.clone(), train_mse.len() - 1);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= params.patience {
                break StopReason::ValidationPatience;
            }
        }
    };
    reg.set_params(&best.1)?;
    let report = TrainReport {
        train_mse,
        val_mse,
        best_val_mse: best.0,
        best_step: best.2,
        epochs,
        stop,
        n_train: train.len(),
        n_val,
        elapsed: started.elapsed(),
    };
    Ok((reg, report))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<TrainRecord>,
    /// Scenarios dropped because the max-min solver failed.
    pub skipped: usize,
    pub scenarios: usize,
    /// Wall-clock time of each successful max-min solve.
    pub solve_times: Vec<Duration>,
}

/// Solves every scenario with the full max-min program and emits one record
/// per AP. Records are shuffled with `shuffle_seed`.
pub fn build_dataset(
    specs: &[ScenarioConfig],
    features: FeatureSpec,
    tol: f64,
    shuffle_seed: u64,
) -> Result<Dataset> {
    let solved: Vec<Option<(Vec<TrainRecord>, Duration)>> = specs
        .par_iter()
        .map(|spec| -> Result<Option<(Vec<TrainRecord>, Duration)>> {
            let scn = spec.generate()?;
            let stats = compute_stats(&scn)?;
            let t0 = Instant::now();
            let Ok(sol) = maxmin_dl_full(&scn, &stats, tol) else {
                return Ok(None);
            };
            let dt = t0.elapsed();
            let recs = features
                .feature_rows(&scn.beta)
                .into_iter()
                .enumerate()
                .map(|(m, f)| TrainRecord { features: f, target: sol.alloc.p[m].clamp(0.0, 1.0) })
                .collect();
            Ok(Some((recs, dt)))
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut solve_times = Vec::new();
    let mut skipped = 0;
    for s in solved {
        match s {
            Some((r, dt)) => {
                records.extend(r);
                solve_times.push(dt);
            }
            None => skipped += 1,
        }
    }
    records.shuffle(&mut seeded(shuffle_seed));
    Ok(Dataset { records, skipped, scenarios: specs.len(), solve_times })
}
