//! Baseline asymmetric uniform quantizer.
//!
//! `s = (max - min) / (2^b - 1)`, `z = round(min/s)`,
//! `q = clamp(round(x/s) - z, 0, 2^b - 1)`, `x_f = s * (q + z)`.
//!
//! Three granularities: per-tensor (one parameter set), per-channel (one set
//! per weight output row, static) and per-token (one set per activation row,
//! recomputed dynamically). Rounding is half-away-from-zero everywhere; a
//! degenerate range (max == min) falls back to `s = 1`, `z = round(min)` so
//! constants still map to a single in-range code.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::batch::{ActivationBatch, WeightMatrix};
use crate::error::{Error, Result};
use crate::math::round_half_away;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
    PerToken,
}

/// Scale/zero-point pair for one quantization group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformParams {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: i64,
    pub granularity: Granularity,
}

impl UniformParams {
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=30).contains(&bits) {
        return Err(Error::InvalidParam(format!(
            "bit width must be in [2, 30], got {bits}"
        )));
    }
    Ok(())
}

fn quantize_with_granularity(
    x: &[f64],
    bits: u32,
    granularity: Granularity,
) -> Result<(Vec<u32>, UniformParams)> {
    check_bits(bits)?;
    if x.is_empty() {
        return Err(Error::EmptyInput("uniform_quantize: empty input".into()));
    }
    let max_code = (1u32 << bits) - 1;
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in x {
        if v < min {
            min = v;
        }
        if v > max {
            max = v;
        }
    }
    let (scale, zero_point) = if max == min {
        (1.0, round_half_away(min) as i64)
    } else {
        let s = (max - min) / max_code as f64;
        (s, round_half_away(min / s) as i64)
    };
    let z = zero_point as f64;
    let codes = x
        .iter()
        .map(|&v| (round_half_away(v / scale) - z).clamp(0.0, max_code as f64) as u32)
        .collect();
    Ok((
        codes,
        UniformParams {
            bits,
            scale,
            zero_point,
            granularity,
        },
    ))
}

/// Quantize a flat vector with one per-tensor parameter set.
pub fn uniform_quantize(x: &[f64], bits: u32) -> Result<(Vec<u32>, UniformParams)> {
    quantize_with_granularity(x, bits, Granularity::PerTensor)
}

/// Reconstruct `s * (q + z)`. Rejects codes outside `[0, 2^b - 1]`.
pub fn uniform_dequantize(codes: &[u32], params: &UniformParams) -> Result<Vec<f64>> {
    let max_code = params.max_code();
    for &c in codes {
        if c > max_code {
            return Err(Error::CodeOutOfRange {
                code: c,
                max: max_code,
                bits: params.bits,
            });
        }
    }
    Ok(codes
        .iter()
        .map(|&c| params.scale * (c as f64 + params.zero_point as f64))
        .collect())
}

/// Per-token dynamically quantized activations.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenQuantized {
    pub bits: u32,
    pub codes: Array2<u32>,
    /// One parameter set per token row.
    pub params: Vec<UniformParams>,
}

/// Quantize each token row of the batch independently.
pub fn per_token_quantize(x: &ActivationBatch, bits: u32) -> Result<TokenQuantized> {
    check_bits(bits)?;
    let tokens = x.tokens();
    let mut codes = Array2::<u32>::zeros(tokens.dim());
    let mut params = Vec::with_capacity(tokens.nrows());
    for (t, row) in tokens.rows().into_iter().enumerate() {
        let slice = row.as_slice().expect("token rows are contiguous");
        let (row_codes, p) = quantize_with_granularity(slice, bits, Granularity::PerToken)?;
        codes.row_mut(t).iter_mut().zip(&row_codes).for_each(|(dst, &c)| *dst = c);
        params.push(p);
    }
    Ok(TokenQuantized {
        bits,
        codes,
        params,
    })
}

/// Dequantize a per-token quantized batch back to a token matrix.
pub fn per_token_dequantize(q: &TokenQuantized) -> Result<Array2<f64>> {
    let mut out = Array2::<f64>::zeros(q.codes.dim());
    for (t, row) in q.codes.rows().into_iter().enumerate() {
        let vals = uniform_dequantize(row.as_slice().expect("contiguous"), &q.params[t])?;
        out.row_mut(t).iter_mut().zip(&vals).for_each(|(dst, &v)| *dst = v);
    }
    Ok(out)
}

/// Per-channel (output row) statically quantized weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformArtifact {
    pub bits: u32,
    pub codes: Array2<u32>,
    /// One parameter set per output channel.
    pub params: Vec<UniformParams>,
}

/// Quantize a weight matrix with one (s, z) per output channel row.
pub fn uniform_quantize_matrix(w: &WeightMatrix, bits: u32) -> Result<UniformArtifact> {
    check_bits(bits)?;
    if w.is_empty() {
        return Err(Error::EmptyInput("uniform_quantize_matrix: empty matrix".into()));
    }
    let mut codes = Array2::<u32>::zeros(w.dim());
    let mut params = Vec::with_capacity(w.nrows());
    for (r, row) in w.rows().into_iter().enumerate() {
        let slice = row.as_slice().expect("weight rows are contiguous");
        let (row_codes, p) = quantize_with_granularity(slice, bits, Granularity::PerChannel)?;
        codes.row_mut(r).iter_mut().zip(&row_codes).for_each(|(dst, &c)| *dst = c);
        params.push(p);
    }
    Ok(UniformArtifact {
        bits,
        codes,
        params,
    })
}

/// Reconstruct the weight matrix from a per-channel artifact.
pub fn uniform_dequantize_matrix(a: &UniformArtifact) -> Result<WeightMatrix> {
    if a.params.len() != a.codes.nrows() {
        return Err(Error::DimMismatch(format!(
            "uniform artifact has {} param sets for {} rows",
            a.params.len(),
            a.codes.nrows()
        )));
    }
    let mut out = Array2::<f64>::zeros(a.codes.dim());
    for (r, row) in a.codes.rows().into_iter().enumerate() {
        let vals = uniform_dequantize(row.as_slice().expect("contiguous"), &a.params[r])?;
        out.row_mut(r).iter_mut().zip(&vals).for_each(|(dst, &v)| *dst = v);
    }
    Ok(out)
}
