//! Twin-log weight quantizer.
//!
//! Weights are split by sign, their magnitudes moved to the log2 domain, and
//! each side quantized on its own affine grid: positive codes occupy
//! `[0, 2^(b-1)-1]`, negative codes `[0, 2^(b-1)]`, with the sign carried by
//! the masks. Reconstruction is `2^(s*(q+z))` with the element's side sign.
//!
//! Two searches shape each channel's grids:
//! - clip factors `alpha, beta` scale the side's top log value and are chosen
//!   by grid search minimizing squared reconstruction error in weight space;
//! - the side's lower grid bound is chosen from a candidate set (the true
//!   minimum plus top-relative spans in half-octave steps) under the same
//!   objective, ties resolved toward the widest span. Anchoring the grid at
//!   the raw minimum wastes almost the whole code budget on near-zero
//!   magnitudes that carry no energy, which is what makes low-bit log grids
//!   lose to uniform ones; the searched bound is what lets them win.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::WeightMatrix;
use crate::error::{Error, Result};
use crate::math::{exp2, log2, round_half_away};

/// Magnitudes below this go to the zero mask and reconstruct to exactly 0.
pub const ZERO_EPSILON: f64 = 9.313225746154785e-10; // 2^-30

/// Candidate spans (octaves below the side's top) for the lower grid bound.
const ANCHOR_SPAN_MAX: f64 = 16.0;
const ANCHOR_SPAN_STEP: f64 = 0.5;

/// A side range narrower than this collapses to the degenerate rule.
const RANGE_EPS: f64 = 1e-12;

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidParam(format!(
            "twin-log bit width must be in [2, 8], got {bits}"
        )));
    }
    Ok(())
}

fn check_clip(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "clip factor {name} must be in (0, 1], got {v}"
        )));
    }
    Ok(())
}

// ── Sign masks ──────────────────────────────────────────────────────────────

/// Exact sign partition of a weight matrix: every element belongs to exactly
/// one of `pos`, `neg`, `zero`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignMasks {
    pub pos: Array2<bool>,
    pub neg: Array2<bool>,
    pub zero: Array2<bool>,
}

impl SignMasks {
    pub fn dims(&self) -> (usize, usize) {
        self.pos.dim()
    }

    /// Check the exact-partition invariant.
    pub fn validate(&self) -> Result<()> {
        if self.pos.dim() != self.neg.dim() || self.pos.dim() != self.zero.dim() {
            return Err(Error::MaskInconsistency("mask dims differ".into()));
        }
        for ((r, c), &p) in self.pos.indexed_iter() {
            let set = p as u8 + self.neg[[r, c]] as u8 + self.zero[[r, c]] as u8;
            if set != 1 {
                return Err(Error::MaskInconsistency(format!(
                    "element ({r}, {c}) has {set} mask bits set"
                )));
            }
        }
        Ok(())
    }
}

/// Partition `w` by sign; magnitudes under [`ZERO_EPSILON`] count as zero.
pub fn build_sign_masks(w: &WeightMatrix) -> Result<SignMasks> {
    let mut pos = Array2::from_elem(w.dim(), false);
    let mut neg = Array2::from_elem(w.dim(), false);
    let mut zero = Array2::from_elem(w.dim(), false);
    for ((r, c), &v) in w.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row: r, col: c });
        }
        if v.abs() < ZERO_EPSILON {
            zero[[r, c]] = true;
        } else if v > 0.0 {
            pos[[r, c]] = true;
        } else {
            neg[[r, c]] = true;
        }
    }
    Ok(SignMasks { pos, neg, zero })
}

// ── Parameters and artifact ─────────────────────────────────────────────────

/// Per-output-channel twin-log parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub s_pos: f64,
    pub s_neg: f64,
    pub z_pos: i64,
    pub z_neg: i64,
    pub clip_alpha: f64,
    pub clip_beta: f64,
}

/// Clip-factor search grid, expressible as `{start, stop, step}` per factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipGrid {
    alphas: Vec<f64>,
    betas: Vec<f64>,
}

impl ClipGrid {
    pub fn new(mut alphas: Vec<f64>, mut betas: Vec<f64>) -> Result<Self> {
        for v in alphas.iter().chain(betas.iter()) {
            check_clip("grid value", *v)?;
        }
        if alphas.is_empty() || betas.is_empty() {
            return Err(Error::InvalidParam("clip grid must be nonempty".into()));
        }
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        betas.sort_by(f64::total_cmp);
        betas.dedup();
        Ok(Self { alphas, betas })
    }

    /// Inclusive arithmetic range per factor; the endpoint is snapped onto
    /// `stop` so binary step accumulation cannot push it past 1.0.
    pub fn from_range(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || stop < start {
            return Err(Error::InvalidParam(format!(
                "invalid clip range [{start}, {stop}] step {step}"
            )));
        }
        let mut vals = Vec::new();
        let mut i = 0u32;
        loop {
            let v = start + f64::from(i) * step;
            if v > stop + step * 1e-6 {
                break;
            }
            vals.push(if v > stop { stop } else { v });
            i += 1;
        }
        Self::new(vals.clone(), vals)
    }

    pub fn singleton(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(vec![alpha], vec![beta])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

impl Default for ClipGrid {
    /// alpha, beta in {0.85, 0.86, ..., 1.00}.
    fn default() -> Self {
        Self::from_range(0.85, 1.0, 0.01).expect("default grid is valid")
    }
}

/// Quantized form of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelQuant {
    /// One code per element; its meaning depends on the element's sign mask.
    pub codes: Vec<u32>,
    pub params: ChannelParams,
}

/// Quantized form of a whole weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinLogArtifact {
    pub bits: u32,
    pub codes: Array2<u32>,
    pub masks: SignMasks,
    /// One parameter set per output channel row.
    pub params: Vec<ChannelParams>,
}

impl TwinLogArtifact {
    pub fn dims(&self) -> (usize, usize) {
        self.codes.dim()
    }

    pub fn pos_max_code(&self) -> u32 {
        (1u32 << (self.bits - 1)) - 1
    }

    pub fn neg_max_code(&self) -> u32 {
        1u32 << (self.bits - 1)
    }
}

// ── Per-channel quantization core ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SideKind {
    Pos,
    Neg,
}

/// Sign split of one channel with per-side log magnitudes and the selected
/// lower grid bound. Computed once per row and reused across the clip grid.
struct RowSplit {
    len: usize,
    /// Per element: Some((side, index into that side's vecs)) or None (zero).
    side_of: Vec<Option<(SideKind, usize)>>,
    pos: SideData,
    neg: SideData,
}

struct SideData {
    values: Vec<f64>, // |w|
    logs: Vec<f64>,   // log2 |w|
    anchor: f64,      // selected lower grid bound (<= max of logs)
}

struct SideBudget {
    steps: f64,
    max_code: u32,
}

fn side_budget(bits: u32, kind: SideKind) -> SideBudget {
    match kind {
        SideKind::Pos => SideBudget {
            steps: ((1u32 << (bits - 1)) - 1) as f64,
            max_code: (1u32 << (bits - 1)) - 1,
        },
        SideKind::Neg => SideBudget {
            steps: (1u32 << (bits - 1)) as f64,
            max_code: 1u32 << (bits - 1),
        },
    }
}

/// Grid parameters for one side.
#[derive(Debug, Clone, Copy)]
struct SideGrid {
    s: f64,
    z: i64,
}

fn side_grid(logs_max: f64, anchor: f64, clip: f64, budget: &SideBudget) -> SideGrid {
    let top = clip * logs_max;
    let range = top - anchor;
    if !(range > RANGE_EPS) {
        // Degenerate: empty range or single log value.
        return SideGrid {
            s: 1.0,
            z: round_half_away(anchor) as i64,
        };
    }
    let s = range / budget.steps;
    SideGrid {
        s,
        z: round_half_away(anchor / s) as i64,
    }
}

fn encode(v: f64, grid: &SideGrid, max_code: u32) -> u32 {
    (round_half_away(v / grid.s) - grid.z as f64).clamp(0.0, max_code as f64) as u32
}

fn decode(code: u32, grid: &SideGrid) -> f64 {
    exp2(grid.s * (code as f64 + grid.z as f64))
}

/// Squared reconstruction error of one side under a given grid.
fn side_error(side: &SideData, grid: &SideGrid, max_code: u32) -> f64 {
    let mut err = 0.0;
    for (v, &l) in side.values.iter().zip(&side.logs) {
        let d = decode(encode(l, grid, max_code), grid);
        let e = d - v;
        err += e * e;
    }
    err
}

/// Pick the side's lower grid bound: the true minimum (widest, evaluated
/// first so it wins ties — arithmetic-progression channels reconstruct
/// exactly through it) against top-relative spans in half-octave steps.
fn select_anchor(values: &[f64], logs: &[f64], budget: &SideBudget) -> f64 {
    let vmin = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let probe = SideData {
        values: values.to_vec(),
        logs: logs.to_vec(),
        anchor: vmin,
    };
    let mut best_anchor = vmin;
    let mut best_err = {
        let grid = side_grid(vmax, vmin, 1.0, budget);
        side_error(&probe, &grid, budget.max_code)
    };
    let mut k = ANCHOR_SPAN_MAX;
    while k >= ANCHOR_SPAN_STEP - 1e-12 {
        let anchor = vmax - k;
        if anchor > vmin {
            let grid = side_grid(vmax, anchor, 1.0, budget);
            let err = side_error(&probe, &grid, budget.max_code);
            if err < best_err {
                best_err = err;
                best_anchor = anchor;
            }
        }
        k -= ANCHOR_SPAN_STEP;
    }
    best_anchor
}

fn prepare_row(w_row: &[f64], bits: u32) -> Result<RowSplit> {
    if w_row.is_empty() {
        return Err(Error::EmptyInput("twin-log channel is empty".into()));
    }
    let mut side_of = Vec::with_capacity(w_row.len());
    let (mut pos_vals, mut neg_vals) = (Vec::new(), Vec::new());
    for (c, &v) in w_row.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row: 0, col: c });
        }
        if v.abs() < ZERO_EPSILON {
            side_of.push(None);
        } else if v > 0.0 {
            side_of.push(Some((SideKind::Pos, pos_vals.len())));
            pos_vals.push(v);
        } else {
            side_of.push(Some((SideKind::Neg, neg_vals.len())));
            neg_vals.push(-v);
        }
    }
    let make_side = |values: Vec<f64>, kind: SideKind| -> SideData {
        let logs: Vec<f64> = values.iter().map(|&v| log2(v)).collect();
        let anchor = if logs.is_empty() {
            0.0
        } else {
            select_anchor(&values, &logs, &side_budget(bits, kind))
        };
        SideData {
            values,
            logs,
            anchor,
        }
    };
    Ok(RowSplit {
        len: w_row.len(),
        side_of,
        pos: make_side(pos_vals, SideKind::Pos),
        neg: make_side(neg_vals, SideKind::Neg),
    })
}

fn quantize_prepared(split: &RowSplit, bits: u32, alpha: f64, beta: f64) -> ChannelQuant {
    let quantize_side = |side: &SideData, kind: SideKind, clip: f64| -> (SideGrid, Vec<u32>) {
        let budget = side_budget(bits, kind);
        if side.logs.is_empty() {
            return (SideGrid { s: 1.0, z: 0 }, Vec::new());
        }
        let vmax = side.logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let grid = side_grid(vmax, side.anchor, clip, &budget);
        let codes = side
            .logs
            .iter()
            .map(|&l| encode(l, &grid, budget.max_code))
            .collect();
        (grid, codes)
    };
    let (pos_grid, pos_codes) = quantize_side(&split.pos, SideKind::Pos, alpha);
    let (neg_grid, neg_codes) = quantize_side(&split.neg, SideKind::Neg, beta);

    let mut codes = vec![0u32; split.len];
    for (i, entry) in split.side_of.iter().enumerate() {
        if let Some((kind, k)) = entry {
            codes[i] = match kind {
                SideKind::Pos => pos_codes[*k],
                SideKind::Neg => neg_codes[*k],
            };
        }
    }
    ChannelQuant {
        codes,
        params: ChannelParams {
            s_pos: pos_grid.s,
            s_neg: neg_grid.s,
            z_pos: pos_grid.z,
            z_neg: neg_grid.z,
            clip_alpha: alpha,
            clip_beta: beta,
        },
    }
}

fn dequantize_prepared(split: &RowSplit, q: &ChannelQuant) -> Vec<f64> {
    let pos_grid = SideGrid {
        s: q.params.s_pos,
        z: q.params.z_pos,
    };
    let neg_grid = SideGrid {
        s: q.params.s_neg,
        z: q.params.z_neg,
    };
    split
        .side_of
        .iter()
        .enumerate()
        .map(|(i, entry)| match entry {
            None => 0.0,
            Some((SideKind::Pos, _)) => decode(q.codes[i], &pos_grid),
            Some((SideKind::Neg, _)) => -decode(q.codes[i], &neg_grid),
        })
        .collect()
}

// ── Public per-channel operations ───────────────────────────────────────────

/// Quantize one output channel at fixed clip factors.
pub fn tlq_quantize_channel(
    w_row: &[f64],
    bits: u32,
    alpha: f64,
    beta: f64,
) -> Result<ChannelQuant> {
    check_bits(bits)?;
    check_clip("alpha", alpha)?;
    check_clip("beta", beta)?;
    let split = prepare_row(w_row, bits)?;
    Ok(quantize_prepared(&split, bits, alpha, beta))
}

/// Reconstruct one channel from its codes and params; signs come from the
/// original row (the matrix-level path uses the stored masks instead).
pub fn tlq_dequantize_channel(w_row: &[f64], bits: u32, q: &ChannelQuant) -> Result<Vec<f64>> {
    check_bits(bits)?;
    let split = prepare_row(w_row, bits)?;
    if q.codes.len() != split.len {
        return Err(Error::DimMismatch(format!(
            "channel has {} elements, {} codes",
            split.len,
            q.codes.len()
        )));
    }
    Ok(dequantize_prepared(&split, q))
}

/// Squared-L2 reconstruction error of a channel quantization, summed in
/// element order (the clip-search objective).
fn row_error(w_row: &[f64], deq: &[f64]) -> f64 {
    let mut err = 0.0;
    for (w, d) in w_row.iter().zip(deq) {
        let e = d - w;
        err += e * e;
    }
    err
}

/// Grid-search the clip factors minimizing squared reconstruction error.
/// Ties break toward the largest `(alpha, beta)` lexicographically.
pub fn clip_grid_search(w_row: &[f64], bits: u32, grid: &ClipGrid) -> Result<(f64, f64)> {
    let (alpha, beta, _) = clip_grid_search_full(w_row, bits, grid)?;
    Ok((alpha, beta))
}

/// Clip search returning the winning quantization alongside the factors.
pub fn clip_grid_search_full(
    w_row: &[f64],
    bits: u32,
    grid: &ClipGrid,
) -> Result<(f64, f64, ChannelQuant)> {
    check_bits(bits)?;
    let split = prepare_row(w_row, bits)?;
    let mut best: Option<(f64, f64, f64, ChannelQuant)> = None;
    for &alpha in grid.alphas() {
        for &beta in grid.betas() {
            let q = quantize_prepared(&split, bits, alpha, beta);
            let err = row_error(w_row, &dequantize_prepared(&split, &q));
            let take = match &best {
                None => true,
                Some((be, ba, bb, _)) => {
                    err < *be
                        || (err == *be && (alpha > *ba || (alpha == *ba && beta > *bb)))
                }
            };
            if take {
                best = Some((err, alpha, beta, q));
            }
        }
    }
    let (_, alpha, beta, q) = best.expect("grid is nonempty");
    Ok((alpha, beta, q))
}

// ── Matrix-level operations ─────────────────────────────────────────────────

/// Quantize a weight matrix: masks once, then per-channel clip search and
/// quantization (channels processed in parallel).
pub fn tlq_quantize_matrix(
    w: &WeightMatrix,
    bits: u32,
    grid: &ClipGrid,
) -> Result<TwinLogArtifact> {
    check_bits(bits)?;
    if w.is_empty() {
        return Err(Error::EmptyInput("tlq_quantize_matrix: empty matrix".into()));
    }
    let masks = build_sign_masks(w)?;
    let rows: Vec<ChannelQuant> = w
        .rows()
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|row| {
            let slice = row.as_slice().expect("weight rows are contiguous");
            let (_, _, q) = clip_grid_search_full(slice, bits, grid)?;
            Ok(q)
        })
        .collect::<Result<_>>()?;
    let mut codes = Array2::<u32>::zeros(w.dim());
    let mut params = Vec::with_capacity(rows.len());
    for (r, q) in rows.into_iter().enumerate() {
        codes
            .row_mut(r)
            .iter_mut()
            .zip(&q.codes)
            .for_each(|(dst, &c)| *dst = c);
        params.push(q.params);
    }
    Ok(TwinLogArtifact {
        bits,
        codes,
        masks,
        params,
    })
}

/// Reconstruct the weight matrix: `2^(s+(q+z+)) * M+ - 2^(s-(q+z-)) * M-`,
/// zero-mask elements map to exactly 0.
pub fn tlq_dequantize(artifact: &TwinLogArtifact) -> Result<WeightMatrix> {
    check_bits(artifact.bits)?;
    artifact.masks.validate()?;
    let (rows, cols) = artifact.codes.dim();
    if artifact.masks.dims() != (rows, cols) {
        return Err(Error::MaskInconsistency(format!(
            "masks are {:?}, codes are {:?}",
            artifact.masks.dims(),
            (rows, cols)
        )));
    }
    if artifact.params.len() != rows {
        return Err(Error::MaskInconsistency(format!(
            "{} param sets for {} channels",
            artifact.params.len(),
            rows
        )));
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        let p = &artifact.params[r];
        let pos_grid = SideGrid {
            s: p.s_pos,
            z: p.z_pos,
        };
        let neg_grid = SideGrid {
            s: p.s_neg,
            z: p.z_neg,
        };
        for c in 0..cols {
            let code = artifact.codes[[r, c]];
            out[[r, c]] = if artifact.masks.zero[[r, c]] {
                0.0
            } else if artifact.masks.pos[[r, c]] {
                if code > artifact.pos_max_code() {
                    return Err(Error::CodeOutOfRange {
                        code,
                        max: artifact.pos_max_code(),
                        bits: artifact.bits,
                    });
                }
                decode(code, &pos_grid)
            } else {
                if code > artifact.neg_max_code() {
                    return Err(Error::CodeOutOfRange {
                        code,
                        max: artifact.neg_max_code(),
                        bits: artifact.bits,
                    });
                }
                -decode(code, &neg_grid)
            };
        }
    }
    Ok(out)
}
