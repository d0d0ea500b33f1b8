//! Per-layer calibration, quantization, simulation and reporting.
//!
//! Calibration runs smoothing migration, computes the fluctuation metric on
//! the smoothed activations, and freezes a rotation plan. Quantization folds
//! the smoothing scales and the plan's weight-side compensation into the
//! weights before quantizing them. Simulation applies the inverse smoothing
//! and the plan to fresh activations, quantizes them per token, executes the
//! integer pipeline and compares against the float reference, which the
//! library exposes as an explicit oracle operation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::batch::{ActivationBatch, WeightMatrix};
use crate::error::{Error, Result};
use crate::intpipe::{integerize, shift_matmul, ShiftConfig};
use crate::rotation::{
    build_dual_transform, compute_j, select_rotation_plan, smooth_migrate, LayerStats,
    RotationPlan, Side, SmoothingVector, Transform,
};
use crate::twinlog::{tlq_dequantize, tlq_quantize_matrix, ClipGrid, TwinLogArtifact};
use crate::uniquant::{
    per_token_dequantize, per_token_quantize, uniform_dequantize_matrix, uniform_quantize_matrix,
    TokenQuantized, UniformArtifact,
};

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Uniform,
    Tlq,
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Scheme::Uniform),
            "tlq" => Ok(Scheme::Tlq),
            other => Err(format!("unknown scheme '{other}' (uniform, tlq)")),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Uniform => "uniform",
            Scheme::Tlq => "tlq",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    None,
    Hadamard,
    Adaptive,
    Dual,
}

impl FromStr for RotationMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(RotationMode::None),
            "hadamard" => Ok(RotationMode::Hadamard),
            "adaptive" => Ok(RotationMode::Adaptive),
            "dual" => Ok(RotationMode::Dual),
            other => Err(format!(
                "unknown rotation mode '{other}' (none, hadamard, adaptive, dual)"
            )),
        }
    }
}

impl std::fmt::Display for RotationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RotationMode::None => "none",
            RotationMode::Hadamard => "hadamard",
            RotationMode::Adaptive => "adaptive",
            RotationMode::Dual => "dual",
        })
    }
}

/// Clip-factor grid as `{start, stop, step}` per factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipGridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for ClipGridSpec {
    fn default() -> Self {
        Self {
            start: 0.85,
            stop: 1.0,
            step: 0.01,
        }
    }
}

impl ClipGridSpec {
    pub fn to_grid(self) -> Result<ClipGrid> {
        ClipGrid::from_range(self.start, self.stop, self.step)
    }
}

fn default_bits_w() -> u32 {
    3
}
fn default_bits_a() -> u32 {
    8
}
fn default_scheme() -> Scheme {
    Scheme::Tlq
}
fn default_rotation_mode() -> RotationMode {
    RotationMode::Adaptive
}
fn default_threshold() -> f64 {
    1.0
}
fn default_migration_strength() -> f64 {
    0.5
}
fn default_shift_precision() -> u32 {
    7
}
fn default_block_size() -> usize {
    128
}
fn default_steps_k() -> usize {
    16
}
fn default_calibration_batches() -> usize {
    8
}
fn default_skip_layers() -> Vec<String> {
    ["embed", "norm_out", "proj_out", "adaln_single", "caption_projection"]
        .map(str::to_string)
        .to_vec()
}

/// Full pipeline configuration; defaults follow the reference setup
/// (threshold 1, migration strength 0.5, per-channel static weights,
/// per-token dynamic activations, full-precision sensitive layers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub bits_w: u32,
    /// 16 means full-precision activation passthrough.
    pub bits_a: u32,
    pub scheme: Scheme,
    pub rotation_mode: RotationMode,
    pub threshold: f64,
    pub migration_strength: f64,
    pub shift_precision: u32,
    pub clip_grid: ClipGridSpec,
    pub block_size: usize,
    pub steps_k: usize,
    /// Substring patterns of layer names kept at full precision.
    pub skip_layers: Vec<String>,
    pub calibration_batches: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits_w: default_bits_w(),
            bits_a: default_bits_a(),
            scheme: default_scheme(),
            rotation_mode: default_rotation_mode(),
            threshold: default_threshold(),
            migration_strength: default_migration_strength(),
            shift_precision: default_shift_precision(),
            clip_grid: ClipGridSpec::default(),
            block_size: default_block_size(),
            steps_k: default_steps_k(),
            skip_layers: default_skip_layers(),
            calibration_batches: default_calibration_batches(),
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits_w) {
            return Err(Error::InvalidParam(format!(
                "bits_w must be in [2, 8], got {}",
                self.bits_w
            )));
        }
        if !(2..=16).contains(&self.bits_a) {
            return Err(Error::InvalidParam(format!(
                "bits_a must be in [2, 16], got {}",
                self.bits_a
            )));
        }
        if !(0.0..=1.0).contains(&self.migration_strength) {
            return Err(Error::InvalidParam(
                "migration_strength must be in [0, 1]".into(),
            ));
        }
        ShiftConfig::new(self.shift_precision)?;
        self.clip_grid.to_grid()?;
        if self.block_size == 0 || !self.block_size.is_power_of_two() {
            return Err(Error::InvalidParam(
                "block_size must be a power of two".into(),
            ));
        }
        if self.calibration_batches == 0 {
            return Err(Error::InvalidParam(
                "calibration_batches must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Activation passthrough mode (no per-token quantization).
    pub fn activations_passthrough(&self) -> bool {
        self.bits_a >= 16
    }
}

/// Substring match against the skip list.
pub fn is_skipped(name: &str, skip_layers: &[String]) -> bool {
    skip_layers.iter().any(|p| !p.is_empty() && name.contains(p))
}

// ── Calibration ─────────────────────────────────────────────────────────────

/// Frozen per-layer calibration products.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub smoothing: SmoothingVector,
    pub plan: RotationPlan,
    pub stats: LayerStats,
}

/// Smoothing first, then the fluctuation metric on smoothed activations,
/// then the rotation plan for the configured mode.
pub fn calibrate_layer(
    x_cal: &ActivationBatch,
    w: &WeightMatrix,
    config: &QuantConfig,
) -> Result<CalibrationResult> {
    config.validate()?;
    let x_cal = x_cal.take_batches(config.calibration_batches)?;
    let x_cal = &x_cal;
    let (smoothing, x_s, _) = smooth_migrate(x_cal, w, config.migration_strength)?;
    let stats = compute_j(&x_s);
    let plan = match config.rotation_mode {
        RotationMode::None => RotationPlan::identity(
            x_cal.channels(),
            config.block_size,
            config.threshold,
            stats.j,
        ),
        RotationMode::Hadamard => RotationPlan {
            channels: x_cal.channels(),
            block_size: config.block_size,
            threshold: config.threshold,
            j_observed: stats.j,
            transform: Transform::Hadamard,
        },
        RotationMode::Dual => RotationPlan {
            channels: x_cal.channels(),
            block_size: config.block_size,
            threshold: config.threshold,
            j_observed: stats.j,
            transform: Transform::Dual(build_dual_transform(
                &x_s,
                config.block_size,
                config.steps_k,
            )?),
        },
        RotationMode::Adaptive => select_rotation_plan(
            &stats,
            config.threshold,
            &x_s,
            config.block_size,
            config.steps_k,
        )?,
    };
    Ok(CalibrationResult {
        smoothing,
        plan,
        stats,
    })
}

// ── Quantization ────────────────────────────────────────────────────────────

/// Quantized weight artifacts for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightArtifacts {
    /// Skip-listed (sensitive) layer: weights stay at full precision.
    PassThrough,
    Uniform(UniformArtifact),
    TwinLog {
        tlq: TwinLogArtifact,
        shift: crate::intpipe::ShiftArtifact,
    },
}

/// Weights with smoothing scales and the plan's weight-side compensation
/// folded in; this is what the quantizer sees.
pub fn transformed_weights(w: &WeightMatrix, calib: &CalibrationResult) -> Result<WeightMatrix> {
    let w_s = calib.smoothing.apply_weights(w)?;
    calib.plan.apply(&w_s, Side::Weights)
}

/// Quantize one layer's weights per the configured scheme; skip-listed
/// layers return the pass-through marker.
pub fn quantize_layer(
    name: &str,
    w: &WeightMatrix,
    calib: &CalibrationResult,
    config: &QuantConfig,
) -> Result<WeightArtifacts> {
    config.validate()?;
    if is_skipped(name, &config.skip_layers) {
        return Ok(WeightArtifacts::PassThrough);
    }
    let w_t = transformed_weights(w, calib)?;
    Ok(match config.scheme {
        Scheme::Uniform => WeightArtifacts::Uniform(uniform_quantize_matrix(&w_t, config.bits_w)?),
        Scheme::Tlq => {
            let tlq = tlq_quantize_matrix(&w_t, config.bits_w, &config.clip_grid.to_grid()?)?;
            let shift = integerize(&tlq, &ShiftConfig::new(config.shift_precision)?)?;
            WeightArtifacts::TwinLog { tlq, shift }
        }
    })
}

// ── Simulation ──────────────────────────────────────────────────────────────

/// Float oracle: `Y = X * W^T` on the raw, untransformed operands.
pub fn float_reference(x: &ActivationBatch, w: &WeightMatrix) -> Array2<f64> {
    x.tokens().dot(&w.t())
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

fn relative_error(got: &Array2<f64>, reference: &Array2<f64>) -> f64 {
    let denom = frobenius(reference).max(1e-30);
    let mut diff = 0.0f64;
    for (a, b) in got.iter().zip(reference.iter()) {
        diff += (a - b) * (a - b);
    }
    diff.sqrt() / denom
}

fn quant_mse(x: &ActivationBatch, bits: u32) -> Result<f64> {
    let q = per_token_quantize(x, bits)?;
    let back = per_token_dequantize(&q)?;
    let n = x.element_count() as f64;
    let mut sum = 0.0;
    for (a, b) in back.iter().zip(x.tokens().iter()) {
        sum += (a - b) * (a - b);
    }
    Ok(sum / n)
}

/// `Y = X * W^T` over per-channel uniform weights and per-token codes,
/// accumulated in exact integers with the scales applied at the end.
fn integer_matmul_uniform(ua: &UniformArtifact, q: &TokenQuantized) -> Result<Array2<f64>> {
    let (out_channels, in_channels) = ua.codes.dim();
    if q.codes.ncols() != in_channels {
        return Err(Error::DimMismatch(format!(
            "weights expect {in_channels} channels, activations have {}",
            q.codes.ncols()
        )));
    }
    let tokens = q.codes.nrows();
    let mut out = Array2::<f64>::zeros((tokens, out_channels));
    for o in 0..out_channels {
        let wp = &ua.params[o];
        for t in 0..tokens {
            let xp = &q.params[t];
            let mut acc = 0i128;
            for c in 0..in_channels {
                let wv = ua.codes[[o, c]] as i128 + wp.zero_point as i128;
                let xv = q.codes[[t, c]] as i128 + xp.zero_point as i128;
                acc += wv * xv;
            }
            out[[t, o]] = wp.scale * xp.scale * acc as f64;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationMetrics {
    /// Per-token quantization MSE on the raw activations.
    pub act_mse_pre: Option<f64>,
    /// Same after smoothing + rotation.
    pub act_mse_post: Option<f64>,
    /// Max |integer pipeline - float matmul over dequantized operands|.
    pub shift_max_deviation: Option<f64>,
    /// Relative Frobenius error against the float reference.
    pub output_rel_err: f64,
}

/// Run one layer end to end on evaluation activations.
pub fn simulate_layer(
    w: &WeightMatrix,
    x: &ActivationBatch,
    calib: &CalibrationResult,
    artifacts: &WeightArtifacts,
    config: &QuantConfig,
) -> Result<(Array2<f64>, SimulationMetrics)> {
    config.validate()?;
    let reference = float_reference(x, w);
    if matches!(artifacts, WeightArtifacts::PassThrough) {
        return Ok((
            reference.clone(),
            SimulationMetrics {
                act_mse_pre: None,
                act_mse_post: None,
                shift_max_deviation: None,
                output_rel_err: 0.0,
            },
        ));
    }

    let x_s = calib.smoothing.apply_activations(x.tokens())?;
    let x_t = x.with_tokens(calib.plan.apply(&x_s, Side::Activations)?)?;
    let w_deq = match artifacts {
        WeightArtifacts::Uniform(ua) => uniform_dequantize_matrix(ua)?,
        WeightArtifacts::TwinLog { tlq, .. } => tlq_dequantize(tlq)?,
        WeightArtifacts::PassThrough => unreachable!("handled above"),
    };

    if config.activations_passthrough() {
        let output = x_t.tokens().dot(&w_deq.t());
        let rel = relative_error(&output, &reference);
        return Ok((
            output,
            SimulationMetrics {
                act_mse_pre: None,
                act_mse_post: None,
                shift_max_deviation: None,
                output_rel_err: rel,
            },
        ));
    }

    let act_mse_pre = quant_mse(x, config.bits_a)?;
    let act_mse_post = quant_mse(&x_t, config.bits_a)?;
    let q = per_token_quantize(&x_t, config.bits_a)?;

    let (output, shift_max_deviation) = match artifacts {
        WeightArtifacts::Uniform(ua) => (integer_matmul_uniform(ua, &q)?, None),
        WeightArtifacts::TwinLog { shift, .. } => {
            let y = shift_matmul(shift, &q.codes, &q.params)?;
            let x_deq = per_token_dequantize(&q)?;
            let float_path = x_deq.dot(&w_deq.t());
            let dev = y
                .iter()
                .zip(float_path.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            (y, Some(dev))
        }
        WeightArtifacts::PassThrough => unreachable!("handled above"),
    };
    let rel = relative_error(&output, &reference);
    Ok((
        output,
        SimulationMetrics {
            act_mse_pre: Some(act_mse_pre),
            act_mse_post: Some(act_mse_post),
            shift_max_deviation,
            output_rel_err: rel,
        },
    ))
}

// ── Layer driver and reports ────────────────────────────────────────────────

/// One row of the per-layer report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub j: f64,
    pub plan_kind: String,
    pub weight_err_uniform: f64,
    pub weight_err_tlq: f64,
    pub act_mse_pre: Option<f64>,
    pub act_mse_post: Option<f64>,
    pub frac_above_5: f64,
    pub frac_above_10: f64,
    pub frac_above_100: f64,
    pub peak: f64,
    pub shift_max_deviation: Option<f64>,
    pub output_rel_err: Option<f64>,
}

/// Per-channel-uniform and twin-log weight reconstruction errors on the
/// transformed weights (reusing artifacts already computed when possible).
pub fn weight_errors(
    w_t: &WeightMatrix,
    config: &QuantConfig,
    artifacts: &WeightArtifacts,
) -> Result<(f64, f64)> {
    let uniform_err = match artifacts {
        WeightArtifacts::Uniform(ua) => frobenius(&(&uniform_dequantize_matrix(ua)? - w_t)),
        _ => {
            let ua = uniform_quantize_matrix(w_t, config.bits_w)?;
            frobenius(&(&uniform_dequantize_matrix(&ua)? - w_t))
        }
    };
    let tlq_err = match artifacts {
        WeightArtifacts::TwinLog { tlq, .. } => frobenius(&(&tlq_dequantize(tlq)? - w_t)),
        _ => {
            let tlq = tlq_quantize_matrix(w_t, config.bits_w, &config.clip_grid.to_grid()?)?;
            frobenius(&(&tlq_dequantize(&tlq)? - w_t))
        }
    };
    Ok((uniform_err, tlq_err))
}

/// Everything one layer produces.
#[derive(Debug, Clone)]
pub struct LayerResult {
    pub report: LayerReport,
    pub calibration: CalibrationResult,
    pub artifacts: WeightArtifacts,
    pub output: Array2<f64>,
}

/// Calibrate, quantize, simulate and report one layer.
pub fn process_layer(
    name: &str,
    w: &WeightMatrix,
    x_cal: &ActivationBatch,
    x_eval: &ActivationBatch,
    config: &QuantConfig,
) -> Result<LayerResult> {
    let calibration = calibrate_layer(x_cal, w, config)?;
    let artifacts = quantize_layer(name, w, &calibration, config)?;
    let (output, metrics) = simulate_layer(w, x_eval, &calibration, &artifacts, config)?;
    let (weight_err_uniform, weight_err_tlq) = if matches!(artifacts, WeightArtifacts::PassThrough)
    {
        (0.0, 0.0)
    } else {
        let w_t = transformed_weights(w, &calibration)?;
        weight_errors(&w_t, config, &artifacts)?
    };
    let stats = &calibration.stats;
    let plan_kind = if matches!(artifacts, WeightArtifacts::PassThrough) {
        "skipped".to_string()
    } else {
        calibration.plan.kind().to_string()
    };
    let report = LayerReport {
        layer: name.to_string(),
        j: stats.j,
        plan_kind,
        weight_err_uniform,
        weight_err_tlq,
        act_mse_pre: metrics.act_mse_pre,
        act_mse_post: metrics.act_mse_post,
        frac_above_5: stats.frac_above_5,
        frac_above_10: stats.frac_above_10,
        frac_above_100: stats.frac_above_100,
        peak: stats.peak,
        shift_max_deviation: metrics.shift_max_deviation,
        output_rel_err: Some(metrics.output_rel_err),
    };
    Ok(LayerResult {
        report,
        calibration,
        artifacts,
        output,
    })
}

/// One ablation cell: quantizer scheme and rotation toggled independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub layer: String,
    pub tlq: bool,
    pub ars: bool,
    pub output_rel_err: f64,
}

/// Run the 2x2 grid (scheme x rotation) on one layer, rows ordered
/// (off,off), (off,on), (on,off), (on,on).
pub fn run_ablation(
    name: &str,
    w: &WeightMatrix,
    x_cal: &ActivationBatch,
    x_eval: &ActivationBatch,
    config: &QuantConfig,
) -> Result<Vec<AblationEntry>> {
    let mut entries = Vec::with_capacity(4);
    for (tlq, ars) in [(false, false), (false, true), (true, false), (true, true)] {
        let cell = QuantConfig {
            scheme: if tlq { Scheme::Tlq } else { Scheme::Uniform },
            rotation_mode: if ars {
                RotationMode::Adaptive
            } else {
                RotationMode::None
            },
            ..config.clone()
        };
        let result = process_layer(name, w, x_cal, x_eval, &cell)?;
        entries.push(AblationEntry {
            layer: name.to_string(),
            tlq,
            ars,
            output_rel_err: result
                .report
                .output_rel_err
                .expect("simulation always fills the output error"),
        });
    }
    Ok(entries)
}

#[derive(Debug, Clone, Serialize)]
struct ReportSummary {
    layers: usize,
    mean_weight_err_uniform: f64,
    mean_weight_err_tlq: f64,
    layers_where_tlq_beats_uniform: usize,
    mean_output_rel_err: Option<f64>,
    max_output_rel_err: Option<f64>,
    plan_kinds: BTreeMap<String, usize>,
}

/// Output paths written by [`report_errors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub ablation_csv: Option<PathBuf>,
}

/// Write the per-layer CSV and JSON summary (plus the ablation grid when
/// given), deterministically ordered by layer name.
pub fn report_errors(
    layers: &[LayerReport],
    ablation: Option<&[AblationEntry]>,
    out_dir: &Path,
) -> Result<ReportPaths> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut sorted: Vec<&LayerReport> = layers.iter().collect();
    sorted.sort_by(|a, b| a.layer.cmp(&b.layer));

    let csv_path = out_dir.join("report.csv");
    {
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Manifest {
            path: csv_path.clone(),
            message: e.to_string(),
        })?;
        for report in &sorted {
            w.serialize(report).map_err(|e| Error::Manifest {
                path: csv_path.clone(),
                message: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
    }

    let n = sorted.len().max(1) as f64;
    let mut plan_kinds = BTreeMap::new();
    for r in &sorted {
        *plan_kinds.entry(r.plan_kind.clone()).or_insert(0usize) += 1;
    }
    let output_errs: Vec<f64> = sorted.iter().filter_map(|r| r.output_rel_err).collect();
    let summary = ReportSummary {
        layers: sorted.len(),
        mean_weight_err_uniform: sorted.iter().map(|r| r.weight_err_uniform).sum::<f64>() / n,
        mean_weight_err_tlq: sorted.iter().map(|r| r.weight_err_tlq).sum::<f64>() / n,
        layers_where_tlq_beats_uniform: sorted
            .iter()
            .filter(|r| r.weight_err_tlq < r.weight_err_uniform)
            .count(),
        mean_output_rel_err: if output_errs.is_empty() {
            None
        } else {
            Some(output_errs.iter().sum::<f64>() / output_errs.len() as f64)
        },
        max_output_rel_err: output_errs.iter().copied().fold(None, |acc, v| {
            Some(acc.map_or(v, |a: f64| a.max(v)))
        }),
        plan_kinds,
    };
    let json_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    let ablation_csv = match ablation {
        None => None,
        Some(entries) => {
            let mut sorted: Vec<&AblationEntry> = entries.iter().collect();
            sorted.sort_by(|a, b| {
                a.layer
                    .cmp(&b.layer)
                    .then(a.tlq.cmp(&b.tlq))
                    .then(a.ars.cmp(&b.ars))
            });
            let path = out_dir.join("ablation.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Manifest {
                path: path.clone(),
                message: e.to_string(),
            })?;
            for entry in sorted {
                w.serialize(entry).map_err(|e| Error::Manifest {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Some(path)
        }
    };
    Ok(ReportPaths {
        csv: csv_path,
        json: json_path,
        ablation_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::RotationKind;
    use crate::tensorio::synth::{
        gen_activations, gen_gaussian_longtail, SyntheticActivationSpec, SyntheticSpec,
    };
    use ndarray::arr2;
    use tempfile::tempdir;

    fn weights(rows: usize, cols: usize, sigma: f64, seed: u64) -> WeightMatrix {
        gen_gaussian_longtail(&SyntheticSpec {
            rows,
            cols,
            sigma,
            tail_fraction: 0.01,
            tail_scale: 8.0,
            seed,
        })
        .unwrap()
    }

    fn acts(channels: usize, sigma: f64, salient: Vec<(usize, f64)>, seed: u64) -> ActivationBatch {
        gen_activations(&SyntheticActivationSpec {
            batches: 2,
            tokens_per_batch: 16,
            channels,
            sigma,
            channel_scales: salient,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn rotation_mode_none_still_smooths() {
        let w = weights(8, 16, 0.02, 1);
        let x = acts(16, 1.0, vec![], 2);
        let config = QuantConfig {
            rotation_mode: RotationMode::None,
            block_size: 16,
            ..QuantConfig::default()
        };
        let calib = calibrate_layer(&x, &w, &config).unwrap();
        assert_eq!(calib.plan.kind(), RotationKind::Identity);
        assert!(!calib.smoothing.is_unit());
    }

    #[test]
    fn adaptive_routes_low_fluctuation_to_hadamard() {
        let w = weights(8, 16, 0.3, 3);
        let x = acts(16, 0.3, vec![], 4);
        let config = QuantConfig {
            block_size: 16,
            ..QuantConfig::default()
        };
        let calib = calibrate_layer(&x, &w, &config).unwrap();
        assert!(calib.stats.j < 1.0, "j = {}", calib.stats.j);
        assert_eq!(calib.plan.kind(), RotationKind::Hadamard);
    }

    #[test]
    fn adaptive_routes_salient_layer_to_dual() {
        let w = weights(8, 16, 1.0, 5);
        let x = acts(16, 3.0, vec![(7, 40.0)], 6);
        let config = QuantConfig {
            block_size: 16,
            ..QuantConfig::default()
        };
        let calib = calibrate_layer(&x, &w, &config).unwrap();
        assert!(calib.stats.j >= 1.0, "j = {}", calib.stats.j);
        assert_eq!(calib.plan.kind(), RotationKind::Dual);
    }

    #[test]
    fn skip_listed_layer_passes_through() {
        let w = weights(4, 8, 0.02, 7);
        let x = acts(8, 1.0, vec![], 8);
        let config = QuantConfig {
            block_size: 8,
            ..QuantConfig::default()
        };
        let calib = calibrate_layer(&x, &w, &config).unwrap();
        let artifacts =
            quantize_layer("blocks.0.adaln_single.linear", &w, &calib, &config).unwrap();
        assert_eq!(artifacts, WeightArtifacts::PassThrough);
        let (y, metrics) = simulate_layer(&w, &x, &calib, &artifacts, &config).unwrap();
        assert_eq!(y, float_reference(&x, &w));
        assert_eq!(metrics.output_rel_err, 0.0);
    }

    #[test]
    fn identity_calibration_matches_direct_quantization() {
        let w = weights(6, 12, 0.02, 9);
        let config = QuantConfig {
            block_size: 8,
            ..QuantConfig::default()
        };
        let calib = CalibrationResult {
            smoothing: SmoothingVector::unit(12, 0.5),
            plan: RotationPlan::identity(12, 8, 1.0, 0.5),
            stats: LayerStats {
                j: 0.5,
                batches: 1,
                tokens_per_batch: 1,
                channels: 12,
                channel_max_abs: vec![0.0; 12],
                frac_above_5: 0.0,
                frac_above_10: 0.0,
                frac_above_100: 0.0,
                peak: 0.0,
            },
        };
        let artifacts = quantize_layer("layer", &w, &calib, &config).unwrap();
        let WeightArtifacts::TwinLog { tlq, .. } = artifacts else {
            panic!("tlq scheme expected");
        };
        let direct =
            tlq_quantize_matrix(&w, config.bits_w, &config.clip_grid.to_grid().unwrap()).unwrap();
        assert_eq!(tlq, direct);
    }

    #[test]
    fn passthrough_activations_on_exact_weights_match_reference_bitwise() {
        // each side's log-magnitudes sit on the side's code grid, so the
        // twin-log round-trip reproduces the weights exactly
        let w = arr2(&[[1.0, 2.0, -4.0, 8.0], [0.5, 1.0, 2.0, 4.0]]);
        let x = acts(4, 1.0, vec![], 10);
        let config = QuantConfig {
            bits_a: 16,
            block_size: 4,
            ..QuantConfig::default()
        };
        let calib = CalibrationResult {
            smoothing: SmoothingVector::unit(4, 0.5),
            plan: RotationPlan::identity(4, 4, 1.0, 0.5),
            stats: compute_j(&x),
        };
        let artifacts = quantize_layer("layer", &w, &calib, &config).unwrap();
        let (y, metrics) = simulate_layer(&w, &x, &calib, &artifacts, &config).unwrap();
        assert_eq!(y, float_reference(&x, &w));
        assert_eq!(metrics.output_rel_err, 0.0);
    }

    #[test]
    fn more_activation_bits_never_hurt() {
        let w = weights(8, 16, 0.02, 11);
        let x_cal = acts(16, 1.0, vec![(3, 30.0)], 12);
        let x_eval = acts(16, 1.0, vec![(3, 30.0)], 13);
        let err_at = |bits_a: u32| {
            let config = QuantConfig {
                bits_a,
                block_size: 16,
                ..QuantConfig::default()
            };
            process_layer("layer", &w, &x_cal, &x_eval, &config)
                .unwrap()
                .report
                .output_rel_err
                .unwrap()
        };
        assert!(err_at(8) <= err_at(4));
    }

    #[test]
    fn zero_activations_give_zero_output() {
        let w = weights(4, 8, 0.02, 14);
        let x_cal = acts(8, 1.0, vec![], 15);
        let zeros = ActivationBatch::new(1, 4, Array2::zeros((4, 8))).unwrap();
        let config = QuantConfig {
            block_size: 8,
            ..QuantConfig::default()
        };
        let calib = calibrate_layer(&x_cal, &w, &config).unwrap();
        let artifacts = quantize_layer("layer", &w, &calib, &config).unwrap();
        let (y, _) = simulate_layer(&w, &zeros, &calib, &artifacts, &config).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pipeline_preserves_product_when_quantizers_disabled() {
        // Smoothing + rotation + weight-side compensation alone must keep
        // X W^T within 1e-5 relative Frobenius.
        let w = weights(12, 32, 0.02, 16);
        let x = acts(32, 2.0, vec![(5, 50.0)], 17);
        let config = QuantConfig {
            bits_a: 16,
            block_size: 32,
            rotation_mode: RotationMode::Dual,
            ..QuantConfig::default()
        };
        let calib = calibrate_layer(&x, &w, &config).unwrap();
        let x_s = calib.smoothing.apply_activations(x.tokens()).unwrap();
        let x_t = calib.plan.apply(&x_s, Side::Activations).unwrap();
        let w_t = transformed_weights(&w, &calib).unwrap();
        let composed = x_t.dot(&w_t.t());
        let reference = float_reference(&x, &w);
        assert!(relative_error(&composed, &reference) < 1e-5);
    }

    #[test]
    fn full_pipeline_beats_uniform_no_rotation_baseline() {
        let w = weights(16, 32, 0.02, 18);
        let x_cal = acts(32, 3.0, vec![(4, 45.0), (19, 30.0)], 19);
        let x_eval = acts(32, 3.0, vec![(4, 45.0), (19, 30.0)], 20);
        let config = QuantConfig {
            bits_a: 4,
            block_size: 32,
            ..QuantConfig::default()
        };
        let entries = run_ablation("layer", &w, &x_cal, &x_eval, &config).unwrap();
        assert_eq!(entries.len(), 4);
        let err = |tlq: bool, ars: bool| {
            entries
                .iter()
                .find(|e| e.tlq == tlq && e.ars == ars)
                .unwrap()
                .output_rel_err
        };
        assert!(err(true, true) < err(false, false));
    }

    #[test]
    fn reports_are_deterministic_and_ordered() {
        let dir = tempdir().unwrap();
        let mk = |name: &str, j: f64| LayerReport {
            layer: name.into(),
            j,
            plan_kind: "hadamard".into(),
            weight_err_uniform: 1.5,
            weight_err_tlq: 0.5,
            act_mse_pre: Some(0.25),
            act_mse_post: Some(0.125),
            frac_above_5: 0.0,
            frac_above_10: 0.0,
            frac_above_100: 0.0,
            peak: 3.0,
            shift_max_deviation: None,
            output_rel_err: Some(0.01),
        };
        let layers = vec![mk("layer_b", 1.0), mk("layer_a", 0.5)];
        let ablation = vec![
            AblationEntry {
                layer: "layer_a".into(),
                tlq: true,
                ars: true,
                output_rel_err: 0.1,
            },
            AblationEntry {
                layer: "layer_a".into(),
                tlq: false,
                ars: false,
                output_rel_err: 0.4,
            },
            AblationEntry {
                layer: "layer_a".into(),
                tlq: true,
                ars: false,
                output_rel_err: 0.2,
            },
            AblationEntry {
                layer: "layer_a".into(),
                tlq: false,
                ars: true,
                output_rel_err: 0.3,
            },
        ];
        let paths = report_errors(&layers, Some(&ablation), dir.path()).unwrap();
        let csv1 = fs::read(&paths.csv).unwrap();
        let text = String::from_utf8(csv1.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("layer,j,plan_kind,weight_err_uniform,weight_err_tlq"));
        assert!(lines[1].starts_with("layer_a,"));
        assert!(lines[2].starts_with("layer_b,"));

        let ab = fs::read_to_string(paths.ablation_csv.as_ref().unwrap()).unwrap();
        let ab_lines: Vec<&str> = ab.lines().collect();
        assert_eq!(ab_lines.len(), 5); // header + 4 grid rows
        assert!(ab_lines[1].contains("false,false"));
        assert!(ab_lines[4].contains("true,true"));

        let json1 = fs::read(&paths.json).unwrap();
        let paths2 = report_errors(&layers, Some(&ablation), dir.path()).unwrap();
        assert_eq!(fs::read(&paths2.csv).unwrap(), csv1);
        assert_eq!(fs::read(&paths2.json).unwrap(), json1);
    }

    #[test]
    fn calibration_batch_budget_truncates_input() {
        let w = weights(4, 8, 0.02, 21);
        let x_full = acts(8, 1.0, vec![], 22); // 2 batches
        let x_first = ActivationBatch::new(
            1,
            16,
            x_full.tokens().slice(ndarray::s![..16, ..]).to_owned(),
        )
        .unwrap();
        let config = QuantConfig {
            calibration_batches: 1,
            block_size: 8,
            ..QuantConfig::default()
        };
        let from_full = calibrate_layer(&x_full, &w, &config).unwrap();
        let from_first = calibrate_layer(&x_first, &w, &config).unwrap();
        assert_eq!(from_full.smoothing, from_first.smoothing);
        assert_eq!(from_full.stats.j, from_first.stats.j);
    }

    #[test]
    fn config_defaults_match_reference_values() {
        let c = QuantConfig::default();
        assert_eq!(c.threshold, 1.0);
        assert_eq!(c.migration_strength, 0.5);
        assert_eq!(c.shift_precision, 7);
        assert_eq!(c.block_size, 128);
        assert!(c.skip_layers.iter().any(|s| s == "adaln_single"));
        assert!(is_skipped("transformer.caption_projection.linear", &c.skip_layers));
        assert!(!is_skipped("blocks.0.attn.to_q", &c.skip_layers));
        c.validate().unwrap();
    }
}
