//! Deterministic synthetic tensors.
//!
//! The generator stack is fixed for cross-platform byte-identical output:
//! ChaCha12 (a keyed counter-based stream) supplies uniforms, the Box–Muller
//! transform maps them to normals using `libm`'s portable transcendentals,
//! and results are snapped to f32-representable values to match the
//! container's real32 storage. The same seed always yields the same bytes.

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{ActivationBatch, WeightMatrix};
use crate::error::{Error, Result};
use crate::math::{cos, ldexp, ln, sin};

/// Gaussian weight matrix with a long-tail subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub sigma: f64,
    /// Fraction of elements boosted into the tail.
    pub tail_fraction: f64,
    /// Multiplier applied to tail elements (>= 1).
    pub tail_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidParam("rows and cols must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParam(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.tail_fraction) {
            return Err(Error::InvalidParam(format!(
                "tail_fraction must be in [0, 1], got {}",
                self.tail_fraction
            )));
        }
        if !(self.tail_scale >= 1.0) {
            return Err(Error::InvalidParam(format!(
                "tail_scale must be >= 1, got {}",
                self.tail_scale
            )));
        }
        Ok(())
    }
}

/// Uniform in [0, 1) from the top 53 bits of the stream.
fn unit(rng: &mut ChaCha12Rng) -> f64 {
    ldexp((rng.next_u64() >> 11) as f64, -53)
}

/// Uniform in (0, 1] so the Box–Muller log argument never hits zero.
fn unit_open(rng: &mut ChaCha12Rng) -> f64 {
    ldexp(((rng.next_u64() >> 11) + 1) as f64, -53)
}

/// Standard normals via Box–Muller on the ChaCha stream.
struct NormalStream {
    rng: ChaCha12Rng,
    spare: Option<f64>,
}

impl NormalStream {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha12Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = unit_open(&mut self.rng);
        let u2 = unit(&mut self.rng);
        let radius = (-2.0 * ln(u1)).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * sin(angle));
        radius * cos(angle)
    }

    fn into_rng(self) -> ChaCha12Rng {
        self.rng
    }
}

fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Generate `rows x cols` samples of `N(0, sigma^2)` and multiply a
/// `tail_fraction` Bernoulli subset by `tail_scale`.
pub fn gen_gaussian_longtail(spec: &SyntheticSpec) -> Result<WeightMatrix> {
    spec.validate()?;
    let n = spec.rows * spec.cols;
    let mut stream = NormalStream::new(spec.seed);
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        vals.push(stream.next() * spec.sigma);
    }
    if spec.tail_fraction > 0.0 {
        let mut rng = stream.into_rng();
        for v in vals.iter_mut() {
            if unit(&mut rng) < spec.tail_fraction {
                *v *= spec.tail_scale;
            }
        }
    }
    for v in vals.iter_mut() {
        *v = snap_f32(*v);
    }
    Ok(Array2::from_shape_vec((spec.rows, spec.cols), vals).expect("shape matches"))
}

/// Synthetic calibration/evaluation activations: Gaussian tokens with
/// selected channels scaled up to act as salient outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticActivationSpec {
    pub batches: usize,
    pub tokens_per_batch: usize,
    pub channels: usize,
    pub sigma: f64,
    /// (channel index, scale) pairs applied after sampling.
    pub channel_scales: Vec<(usize, f64)>,
    pub seed: u64,
}

pub fn gen_activations(spec: &SyntheticActivationSpec) -> Result<ActivationBatch> {
    if spec.batches == 0 || spec.tokens_per_batch == 0 || spec.channels == 0 {
        return Err(Error::InvalidParam(
            "activation dims must be positive".into(),
        ));
    }
    if !(spec.sigma > 0.0) {
        return Err(Error::InvalidParam(format!(
            "sigma must be positive, got {}",
            spec.sigma
        )));
    }
    for &(c, scale) in &spec.channel_scales {
        if c >= spec.channels {
            return Err(Error::InvalidParam(format!(
                "salient channel {c} out of range for {} channels",
                spec.channels
            )));
        }
        if !scale.is_finite() {
            return Err(Error::InvalidParam("salient scale must be finite".into()));
        }
    }
    let rows = spec.batches * spec.tokens_per_batch;
    let mut stream = NormalStream::new(spec.seed);
    let mut data = Array2::<f64>::zeros((rows, spec.channels));
    for v in data.iter_mut() {
        *v = stream.next() * spec.sigma;
    }
    for &(c, scale) in &spec.channel_scales {
        data.column_mut(c).mapv_inplace(|v| v * scale);
    }
    data.mapv_inplace(snap_f32);
    ActivationBatch::new(spec.batches, spec.tokens_per_batch, data)
}
