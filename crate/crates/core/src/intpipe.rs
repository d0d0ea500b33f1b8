//! Shift-only integer execution pipeline.
//!
//! Twin-log reconstruction exponents `e = s*(q+z)` are split into an integer
//! part `f = floor(e)` and residual `r = e - f in [0,1)`; the residual factor
//! `2^r` is integerized on a `2^-I` grid as `I^r = round(2^r * 2^I)`. The
//! weight/activation product then needs only integer multiplies, shifts by
//! `f - I` and mask selects, with the per-token activation scale applied once
//! at the end.
//!
//! The matmul is simulated bit-exactly: every row's terms are aligned to the
//! row's smallest exponent and accumulated in checked 128-bit integers, so a
//! negative effective shift never truncates; overflow is reported, never
//! wrapped. Per-token zero-points are folded into an additive correction
//! computed from the row's coefficient sum.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{exp2, ldexp, round_half_away};
use crate::twinlog::{SignMasks, TwinLogArtifact};
use crate::uniquant::UniformParams;

/// Shift precision: residual factors are integerized on a `2^-I` grid
/// (I = 6, 7, 8 gives 1/64, 1/128, 1/256).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub precision: u32,
}

impl ShiftConfig {
    pub fn new(precision: u32) -> Result<Self> {
        if !(1..=24).contains(&precision) {
            return Err(Error::InvalidParam(format!(
                "shift precision must be in [1, 24], got {precision}"
            )));
        }
        Ok(Self { precision })
    }
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self { precision: 7 }
    }
}

/// Hardware-executable form of a twin-log artifact: per element an integer
/// exponent and an integerized residual, per side.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftArtifact {
    pub config: ShiftConfig,
    pub masks: SignMasks,
    pub f_pos: Array2<i32>,
    pub f_neg: Array2<i32>,
    pub res_pos: Array2<u32>,
    pub res_neg: Array2<u32>,
}

impl ShiftArtifact {
    pub fn dims(&self) -> (usize, usize) {
        self.f_pos.dim()
    }

    /// Residuals live in `[2^I, 2^(I+1)]` since `r in [0, 1)`.
    pub fn validate_residual_range(&self) -> Result<()> {
        let lo = 1u32 << self.config.precision;
        let hi = 1u32 << (self.config.precision + 1);
        for ((r, c), &m) in self.masks.pos.indexed_iter() {
            if m && !(lo..=hi).contains(&self.res_pos[[r, c]]) {
                return Err(Error::MaskInconsistency(format!(
                    "res_pos[{r},{c}] = {} outside [{lo}, {hi}]",
                    self.res_pos[[r, c]]
                )));
            }
        }
        for ((r, c), &m) in self.masks.neg.indexed_iter() {
            if m && !(lo..=hi).contains(&self.res_neg[[r, c]]) {
                return Err(Error::MaskInconsistency(format!(
                    "res_neg[{r},{c}] = {} outside [{lo}, {hi}]",
                    self.res_neg[[r, c]]
                )));
            }
        }
        Ok(())
    }
}

fn split_exponent(e: f64, config: &ShiftConfig) -> Result<(i32, u32)> {
    if !e.is_finite() {
        return Err(Error::InvalidParam(format!(
            "non-finite reconstruction exponent {e}"
        )));
    }
    let f = e.floor();
    let r = e - f; // in [0, 1)
    let grid = exp2(config.precision as f64);
    let res = round_half_away(exp2(r) * grid) as u32;
    Ok((f as i32, res))
}

/// Decompose a twin-log artifact into integer exponents and integerized
/// residuals, both sides independently.
pub fn integerize(artifact: &TwinLogArtifact, config: &ShiftConfig) -> Result<ShiftArtifact> {
    ShiftConfig::new(config.precision)?;
    artifact.masks.validate()?;
    let dims = artifact.codes.dim();
    let mut f_pos = Array2::<i32>::zeros(dims);
    let mut f_neg = Array2::<i32>::zeros(dims);
    let mut res_pos = Array2::<u32>::zeros(dims);
    let mut res_neg = Array2::<u32>::zeros(dims);
    for ((r, c), &code) in artifact.codes.indexed_iter() {
        let p = &artifact.params[r];
        if artifact.masks.pos[[r, c]] {
            let e = p.s_pos * (code as f64 + p.z_pos as f64);
            let (f, res) = split_exponent(e, config)?;
            f_pos[[r, c]] = f;
            res_pos[[r, c]] = res;
        } else if artifact.masks.neg[[r, c]] {
            let e = p.s_neg * (code as f64 + p.z_neg as f64);
            let (f, res) = split_exponent(e, config)?;
            f_neg[[r, c]] = f;
            res_neg[[r, c]] = res;
        }
    }
    Ok(ShiftArtifact {
        config: *config,
        masks: artifact.masks.clone(),
        f_pos,
        f_neg,
        res_pos,
        res_neg,
    })
}

/// Worst-case relative error of the residual integerization: half a grid step
/// relative to `2^r >= 1`, i.e. `2^-(I+1)`.
pub fn residual_error_bound(config: &ShiftConfig) -> f64 {
    exp2(-(config.precision as f64 + 1.0))
}

/// One weight row prepared for exact accumulation: coefficients aligned to
/// the row's minimum exponent.
struct AlignedRow {
    /// (input index, signed coefficient res * 2^(f - I - e_min)).
    coeffs: Vec<(usize, i128)>,
    coeff_sum: i128,
    e_min: i32,
}

fn align_row(weights: &ShiftArtifact, row: usize) -> Result<Option<AlignedRow>> {
    let cols = weights.dims().1;
    let i = weights.config.precision as i32;
    let mut elems: Vec<(usize, i128, i32)> = Vec::new();
    let mut e_min = i32::MAX;
    for c in 0..cols {
        let (sign, f, res) = if weights.masks.pos[[row, c]] {
            (1i128, weights.f_pos[[row, c]], weights.res_pos[[row, c]])
        } else if weights.masks.neg[[row, c]] {
            (-1i128, weights.f_neg[[row, c]], weights.res_neg[[row, c]])
        } else {
            continue;
        };
        let e = f - i;
        e_min = e_min.min(e);
        elems.push((c, sign * res as i128, e));
    }
    if elems.is_empty() {
        return Ok(None);
    }
    let overflow = |detail: String| Error::AccumulatorOverflow { row, detail };
    let mut coeffs = Vec::with_capacity(elems.len());
    let mut coeff_sum = 0i128;
    for (c, base, e) in elems {
        let shift = (e - e_min) as u32;
        if shift > 126 {
            return Err(overflow(format!(
                "exponent spread {shift} bits at col {c} exceeds the 128-bit accumulator"
            )));
        }
        let coeff = base
            .checked_mul(1i128 << shift)
            .ok_or_else(|| overflow(format!("coefficient overflow at col {c}")))?;
        coeff_sum = coeff_sum
            .checked_add(coeff)
            .ok_or_else(|| overflow("row coefficient sum overflow".into()))?;
        coeffs.push((c, coeff));
    }
    Ok(Some(AlignedRow {
        coeffs,
        coeff_sum,
        e_min,
    }))
}

/// SHIFT/AND matmul: `Y = X * W^T` over integerized weights and per-token
/// quantized activation codes. The integer core is exact; the per-token
/// activation scale multiplies once at the end.
pub fn shift_matmul(
    weights: &ShiftArtifact,
    act_codes: &Array2<u32>,
    act_params: &[UniformParams],
) -> Result<Array2<f64>> {
    let (out_channels, in_channels) = weights.dims();
    let tokens = act_codes.nrows();
    if act_codes.ncols() != in_channels {
        return Err(Error::DimMismatch(format!(
            "weights expect {in_channels} input channels, activations have {}",
            act_codes.ncols()
        )));
    }
    if act_params.len() != tokens {
        return Err(Error::DimMismatch(format!(
            "{} token rows but {} param sets",
            tokens,
            act_params.len()
        )));
    }

    let columns: Vec<Vec<f64>> = (0..out_channels)
        .into_par_iter()
        .map(|o| -> Result<Vec<f64>> {
            let overflow = |detail: String| Error::AccumulatorOverflow { row: o, detail };
            let mut col = vec![0.0f64; tokens];
            let Some(aligned) = align_row(weights, o)? else {
                return Ok(col); // all-zero-mask row: output 0 regardless of input
            };
            for t in 0..tokens {
                let mut dot = 0i128;
                for &(c, coeff) in &aligned.coeffs {
                    let term = coeff
                        .checked_mul(act_codes[[t, c]] as i128)
                        .ok_or_else(|| overflow(format!("term overflow at col {c}")))?;
                    dot = dot
                        .checked_add(term)
                        .ok_or_else(|| overflow("dot accumulation overflow".into()))?;
                }
                // Fold the token's zero-point: sum_c w_c*(q+z) = sum w_c*q + z*sum w_c.
                let p = &act_params[t];
                let corrected = aligned
                    .coeff_sum
                    .checked_mul(p.zero_point as i128)
                    .and_then(|zc| dot.checked_add(zc))
                    .ok_or_else(|| overflow("zero-point correction overflow".into()))?;
                col[t] = ldexp(corrected as f64, aligned.e_min) * p.scale;
            }
            Ok(col)
        })
        .collect::<Result<_>>()?;

    let mut out = Array2::<f64>::zeros((tokens, out_channels));
    for (o, col) in columns.iter().enumerate() {
        for t in 0..tokens {
            out[[t, o]] = col[t];
        }
    }
    Ok(out)
}
