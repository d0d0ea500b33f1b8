//! Configuration resolution: built-in defaults, then the JSON config file
//! (`--config` or `$LRQ_CONFIG`), then explicit command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use lrq_core::pipeline::{QuantConfig, RotationMode, Scheme};

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Weight bit width, 2-8 [default: 3]
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..=8))]
    pub bits_w: Option<u32>,

    /// Activation bit width, 2-16; 16 keeps activations at full precision [default: 8]
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..=16))]
    pub bits_a: Option<u32>,

    /// Weight quantizer: uniform | tlq [default: tlq]
    #[arg(long)]
    pub scheme: Option<Scheme>,

    /// Rotation mode: none | hadamard | adaptive | dual [default: adaptive]
    #[arg(long)]
    pub rotation_mode: Option<RotationMode>,

    /// Fluctuation threshold routing layers to the dual transform [default: 1]
    #[arg(long)]
    pub threshold: Option<f64>,

    /// Difficulty migration strength in [0, 1] [default: 0.5]
    #[arg(long)]
    pub migration_strength: Option<f64>,

    /// Shift precision I: residuals integerized on a 2^-I grid [default: 7]
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=24))]
    pub shift_precision: Option<u32>,

    /// Clip search grid start [default: 0.85]
    #[arg(long)]
    pub clip_start: Option<f64>,

    /// Clip search grid stop [default: 1.0]
    #[arg(long)]
    pub clip_stop: Option<f64>,

    /// Clip search grid step [default: 0.01]
    #[arg(long)]
    pub clip_step: Option<f64>,

    /// Rotation block size, power of two [default: 128]
    #[arg(long)]
    pub block_size: Option<usize>,

    /// Greedy rotation step budget per block [default: 16]
    #[arg(long)]
    pub steps_k: Option<usize>,

    /// Comma-separated layer-name substrings kept at full precision
    /// [default: embed,norm_out,proj_out,adaln_single,caption_projection]
    #[arg(long, value_delimiter = ',')]
    pub skip_layers: Option<Vec<String>>,

    /// Calibration batch count [default: 8, within the 4-10 prompt range]
    #[arg(long)]
    pub calibration_batches: Option<usize>,
}

impl ConfigArgs {
    fn apply(&self, config: &mut QuantConfig) {
        if let Some(v) = self.bits_w {
            config.bits_w = v;
        }
        if let Some(v) = self.bits_a {
            config.bits_a = v;
        }
        if let Some(v) = self.scheme {
            config.scheme = v;
        }
        if let Some(v) = self.rotation_mode {
            config.rotation_mode = v;
        }
        if let Some(v) = self.threshold {
            config.threshold = v;
        }
        if let Some(v) = self.migration_strength {
            config.migration_strength = v;
        }
        if let Some(v) = self.shift_precision {
            config.shift_precision = v;
        }
        if let Some(v) = self.clip_start {
            config.clip_grid.start = v;
        }
        if let Some(v) = self.clip_stop {
            config.clip_grid.stop = v;
        }
        if let Some(v) = self.clip_step {
            config.clip_grid.step = v;
        }
        if let Some(v) = self.block_size {
            config.block_size = v;
        }
        if let Some(v) = self.steps_k {
            config.steps_k = v;
        }
        if let Some(v) = &self.skip_layers {
            config.skip_layers = v.clone();
        }
        if let Some(v) = self.calibration_batches {
            config.calibration_batches = v;
        }
    }
}

/// Defaults -> config file -> flags.
pub fn resolve(config_path: Option<&Path>, args: &ConfigArgs) -> anyhow::Result<QuantConfig> {
    let mut config = QuantConfig::default();
    let path: Option<PathBuf> = config_path
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("LRQ_CONFIG").map(PathBuf::from));
    if let Some(path) = path {
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        config = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
    }
    args.apply(&mut config);
    config.validate()?;
    Ok(config)
}
