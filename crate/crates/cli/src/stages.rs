//! Stage implementations behind the subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lrq_core::pipeline::{
    calibrate_layer, is_skipped, quantize_layer, report_errors, run_ablation, simulate_layer,
    transformed_weights, weight_errors, AblationEntry, CalibrationResult, LayerReport,
    QuantConfig, WeightArtifacts,
};
use lrq_core::rotation::LayerStats;
use lrq_core::tensorio::{
    gen_activations, gen_gaussian_longtail, load_artifact, save_artifact, Artifact,
    ManifestWriter, SyntheticActivationSpec, SyntheticSpec, TensorData,
};

use crate::corpus::{
    layer_manifest, load_batch, load_weight, read_index, save_layer_tensors, write_index,
    CorpusIndex, CorpusLayer,
};
use crate::SynthArgs;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CalibrationRecord {
    name: String,
    stats: LayerStats,
    plan_kind: String,
    smoothing_manifest: PathBuf,
    plan_manifest: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CalibrationFile {
    config: QuantConfig,
    layers: Vec<CalibrationRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuantizeRecord {
    name: String,
    kind: String,
    manifests: Vec<PathBuf>,
    report: LayerReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuantizeFile {
    config: QuantConfig,
    calibration: PathBuf,
    layers: Vec<QuantizeRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimulateFile {
    config: QuantConfig,
    layers: Vec<LayerReport>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ── synth ───────────────────────────────────────────────────────────────────

pub fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    if args.layers == 0 {
        bail!("--layers must be positive");
    }
    let base = args.seed.wrapping_mul(1_000_003);
    let mut layers = Vec::with_capacity(args.layers);
    for i in 0..args.layers {
        let name = format!("layer_{i:03}");
        let dir = args.out.join(&name);
        let weight = gen_gaussian_longtail(&SyntheticSpec {
            rows: args.rows,
            cols: args.cols,
            sigma: args.sigma,
            tail_fraction: args.tail_fraction,
            tail_scale: args.tail_scale,
            seed: base.wrapping_add(3 * i as u64),
        })?;
        let channel_scales = salient_channels(i, args);
        let calib = gen_activations(&SyntheticActivationSpec {
            batches: args.batches,
            tokens_per_batch: args.tokens,
            channels: args.cols,
            sigma: args.act_sigma,
            channel_scales: channel_scales.clone(),
            seed: base.wrapping_add(3 * i as u64 + 1),
        })?;
        let eval = gen_activations(&SyntheticActivationSpec {
            batches: args.batches,
            tokens_per_batch: args.tokens,
            channels: args.cols,
            sigma: args.act_sigma,
            channel_scales,
            seed: base.wrapping_add(3 * i as u64 + 2),
        })?;
        save_layer_tensors(&dir, &weight, &calib, &eval)?;
        layers.push(CorpusLayer {
            name: name.clone(),
            dir: name,
        });
    }
    write_index(&args.out, &CorpusIndex { layers })?;
    println!(
        "wrote {} layers to {}",
        args.layers,
        args.out.join("corpus.json").display()
    );
    Ok(())
}

fn salient_channels(layer: usize, args: &SynthArgs) -> Vec<(usize, f64)> {
    if layer >= args.salient_layers || args.salient_channels == 0 {
        return Vec::new();
    }
    let want = args.salient_channels.min(args.cols);
    let mut picked = std::collections::BTreeSet::new();
    let mut k = 0usize;
    while picked.len() < want {
        picked.insert((layer * 13 + k * 17 + 3) % args.cols);
        k += 1;
    }
    picked
        .into_iter()
        .map(|c| (c, args.salient_scale))
        .collect()
}

// ── calibrate ───────────────────────────────────────────────────────────────

pub fn calibrate(corpus: &Path, out: &Path, config: &QuantConfig) -> anyhow::Result<()> {
    let index = read_index(corpus)?;
    let mut records: Vec<CalibrationRecord> = index
        .layers
        .par_iter()
        .map(|layer| -> anyhow::Result<CalibrationRecord> {
            let manifest = layer_manifest(corpus, layer);
            let w = load_weight(&manifest)?;
            let x_cal = load_batch(&manifest, "calib")?;
            let result = calibrate_layer(&x_cal, &w, config)
                .with_context(|| format!("calibrating layer {}", layer.name))?;
            let layer_dir = out.join("layers").join(&layer.name);
            let smoothing_manifest =
                save_artifact(&Artifact::Smoothing(result.smoothing.clone()), &layer_dir)?;
            let plan_manifest =
                save_artifact(&Artifact::Rotation(result.plan.clone()), &layer_dir)?;
            Ok(CalibrationRecord {
                name: layer.name.clone(),
                plan_kind: result.plan.kind().to_string(),
                stats: result.stats,
                smoothing_manifest,
                plan_manifest,
            })
        })
        .collect::<anyhow::Result<_>>()?;
    records.sort_by(|a, b| a.name.cmp(&b.name));
    let path = out.join("calibration.json");
    write_json(
        &path,
        &CalibrationFile {
            config: config.clone(),
            layers: records,
        },
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_calibration_result(record: &CalibrationRecord) -> anyhow::Result<CalibrationResult> {
    let Artifact::Smoothing(smoothing) = load_artifact(&record.smoothing_manifest)? else {
        bail!(
            "{} does not hold a smoothing artifact",
            record.smoothing_manifest.display()
        );
    };
    let Artifact::Rotation(plan) = load_artifact(&record.plan_manifest)? else {
        bail!(
            "{} does not hold a rotation plan",
            record.plan_manifest.display()
        );
    };
    Ok(CalibrationResult {
        smoothing,
        plan,
        stats: record.stats.clone(),
    })
}

// ── quantize ────────────────────────────────────────────────────────────────

pub fn quantize(
    corpus: &Path,
    out: &Path,
    calibration: Option<&Path>,
    config: &QuantConfig,
) -> anyhow::Result<()> {
    let calibration_path = match calibration {
        Some(dir) => dir.join("calibration.json"),
        None => {
            calibrate(corpus, out, config)?;
            out.join("calibration.json")
        }
    };
    let calib_file: CalibrationFile = read_json(&calibration_path)?;
    let index = read_index(corpus)?;

    let mut records: Vec<QuantizeRecord> = index
        .layers
        .par_iter()
        .map(|layer| -> anyhow::Result<QuantizeRecord> {
            let record = calib_file
                .layers
                .iter()
                .find(|r| r.name == layer.name)
                .with_context(|| format!("layer {} missing from calibration", layer.name))?;
            let manifest = layer_manifest(corpus, layer);
            let w = load_weight(&manifest)?;
            let calib = load_calibration_result(record)?;
            let artifacts = quantize_layer(&layer.name, &w, &calib, config)
                .with_context(|| format!("quantizing layer {}", layer.name))?;
            let layer_dir = out.join("layers").join(&layer.name);
            let (kind, manifests) = match &artifacts {
                WeightArtifacts::PassThrough => ("passthrough".to_string(), vec![]),
                WeightArtifacts::Uniform(ua) => (
                    "uniform".to_string(),
                    vec![save_artifact(&Artifact::Uniform(ua.clone()), &layer_dir)?],
                ),
                WeightArtifacts::TwinLog { tlq, shift } => (
                    "twinlog".to_string(),
                    vec![
                        save_artifact(&Artifact::TwinLog(tlq.clone()), &layer_dir)?,
                        save_artifact(&Artifact::Shift(shift.clone()), &layer_dir)?,
                    ],
                ),
            };
            let (weight_err_uniform, weight_err_tlq) =
                if matches!(artifacts, WeightArtifacts::PassThrough) {
                    (0.0, 0.0)
                } else {
                    let w_t = transformed_weights(&w, &calib)?;
                    weight_errors(&w_t, config, &artifacts)?
                };
            let plan_kind = if matches!(artifacts, WeightArtifacts::PassThrough) {
                "skipped".to_string()
            } else {
                record.plan_kind.clone()
            };
            let stats = &record.stats;
            Ok(QuantizeRecord {
                name: layer.name.clone(),
                kind,
                manifests,
                report: LayerReport {
                    layer: layer.name.clone(),
                    j: stats.j,
                    plan_kind,
                    weight_err_uniform,
                    weight_err_tlq,
                    act_mse_pre: None,
                    act_mse_post: None,
                    frac_above_5: stats.frac_above_5,
                    frac_above_10: stats.frac_above_10,
                    frac_above_100: stats.frac_above_100,
                    peak: stats.peak,
                    shift_max_deviation: None,
                    output_rel_err: None,
                },
            })
        })
        .collect::<anyhow::Result<_>>()?;
    records.sort_by(|a, b| a.name.cmp(&b.name));
    let path = out.join("quantize.json");
    write_json(
        &path,
        &QuantizeFile {
            config: config.clone(),
            calibration: calibration_path,
            layers: records,
        },
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_weight_artifacts(record: &QuantizeRecord) -> anyhow::Result<WeightArtifacts> {
    match record.kind.as_str() {
        "passthrough" => Ok(WeightArtifacts::PassThrough),
        "uniform" => {
            let Artifact::Uniform(ua) = load_artifact(&record.manifests[0])? else {
                bail!("expected a uniform artifact for layer {}", record.name);
            };
            Ok(WeightArtifacts::Uniform(ua))
        }
        "twinlog" => {
            let Artifact::TwinLog(tlq) = load_artifact(&record.manifests[0])? else {
                bail!("expected a twin-log artifact for layer {}", record.name);
            };
            let Artifact::Shift(shift) = load_artifact(&record.manifests[1])? else {
                bail!("expected a shift artifact for layer {}", record.name);
            };
            Ok(WeightArtifacts::TwinLog { tlq, shift })
        }
        other => bail!("unknown artifact kind '{other}' for layer {}", record.name),
    }
}

// ── simulate ────────────────────────────────────────────────────────────────

pub fn simulate(corpus: &Path, run: &Path, config: &QuantConfig) -> anyhow::Result<()> {
    let quantize_file: QuantizeFile = read_json(&run.join("quantize.json"))?;
    let calib_file: CalibrationFile = read_json(&quantize_file.calibration)?;
    let index = read_index(corpus)?;

    let mut reports: Vec<LayerReport> = index
        .layers
        .par_iter()
        .map(|layer| -> anyhow::Result<LayerReport> {
            let qrec = quantize_file
                .layers
                .iter()
                .find(|r| r.name == layer.name)
                .with_context(|| format!("layer {} missing from quantize run", layer.name))?;
            let crec = calib_file
                .layers
                .iter()
                .find(|r| r.name == layer.name)
                .with_context(|| format!("layer {} missing from calibration", layer.name))?;
            let manifest = layer_manifest(corpus, layer);
            let w = load_weight(&manifest)?;
            let x_eval = load_batch(&manifest, "eval")?;
            let calib = load_calibration_result(crec)?;
            let artifacts = load_weight_artifacts(qrec)?;
            let (output, metrics) = simulate_layer(&w, &x_eval, &calib, &artifacts, config)
                .with_context(|| format!("simulating layer {}", layer.name))?;

            let layer_dir = run.join("layers").join(&layer.name);
            let mut writer = ManifestWriter::new(&layer_dir, "output");
            writer.add("output", &TensorData::Real(output.into_dyn()))?;
            writer.finish()?;

            let mut report = qrec.report.clone();
            report.act_mse_pre = metrics.act_mse_pre;
            report.act_mse_post = metrics.act_mse_post;
            report.shift_max_deviation = metrics.shift_max_deviation;
            report.output_rel_err = Some(metrics.output_rel_err);
            Ok(report)
        })
        .collect::<anyhow::Result<_>>()?;
    reports.sort_by(|a, b| a.layer.cmp(&b.layer));
    let path = run.join("simulate.json");
    write_json(
        &path,
        &SimulateFile {
            config: config.clone(),
            layers: reports,
        },
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

// ── report ──────────────────────────────────────────────────────────────────

pub fn report(
    run: &Path,
    out: &Path,
    ablation: bool,
    corpus: Option<&Path>,
    config: &QuantConfig,
) -> anyhow::Result<()> {
    let simulate_path = run.join("simulate.json");
    let quantize_path = run.join("quantize.json");
    let layers: Vec<LayerReport> = if simulate_path.exists() {
        read_json::<SimulateFile>(&simulate_path)?.layers
    } else if quantize_path.exists() {
        read_json::<QuantizeFile>(&quantize_path)?
            .layers
            .into_iter()
            .map(|r| r.report)
            .collect()
    } else {
        bail!(
            "{} holds neither simulate.json nor quantize.json",
            run.display()
        );
    };

    let ablation_entries: Option<Vec<AblationEntry>> = if ablation {
        let corpus = corpus.context("--ablation needs --corpus to rerun the grid")?;
        let index = read_index(corpus)?;
        let mut entries: Vec<AblationEntry> = index
            .layers
            .par_iter()
            .map(|layer| -> anyhow::Result<Vec<AblationEntry>> {
                if is_skipped(&layer.name, &config.skip_layers) {
                    return Ok(Vec::new());
                }
                let manifest = layer_manifest(corpus, layer);
                let w = load_weight(&manifest)?;
                let x_cal = load_batch(&manifest, "calib")?;
                let x_eval = load_batch(&manifest, "eval")?;
                Ok(run_ablation(&layer.name, &w, &x_cal, &x_eval, config)?)
            })
            .collect::<anyhow::Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        entries.sort_by(|a, b| {
            a.layer
                .cmp(&b.layer)
                .then(a.tlq.cmp(&b.tlq))
                .then(a.ars.cmp(&b.ars))
        });
        Some(entries)
    } else {
        None
    };

    let paths = report_errors(&layers, ablation_entries.as_deref(), out)?;
    println!("wrote {}", paths.csv.display());
    println!("wrote {}", paths.json.display());
    if let Some(p) = paths.ablation_csv {
        println!("wrote {}", p.display());
    }
    Ok(())
}
