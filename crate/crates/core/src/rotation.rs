//! Outlier-aware activation transforms.
//!
//! A layer's activations are scored by the fluctuation metric
//! `J = ||X||_F / sqrt(B*N*C)`; low-J layers get a Hadamard rotation, high-J
//! layers a dual transform: a greedy outlier-aware rotation, a zigzag channel
//! permutation that balances per-block ranges, and a second greedy rotation.
//! Weights are compensated with the same right-multiplication so the layer
//! product is preserved: `X W^T = (X T)(T^T W^T)`.
//!
//! SmoothQuant-style migration (`smooth_migrate`) rescales input channels to
//! shift quantization difficulty from activations to weights before any
//! rotation is planned.
//!
//! All transform matrices are snapped to f32-representable values at
//! construction so container round-trips are bit-exact; orthogonality
//! tolerances (1e-5) sit far above the snap error.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::batch::{ActivationBatch, WeightMatrix};
use crate::error::{Error, Result};
use crate::math::pow;

const SMOOTH_EPS: f64 = 1e-12;

// ── Layer statistics ────────────────────────────────────────────────────────

/// Fluctuation metric and outlier profile of one layer's activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    /// `||X||_F / sqrt(B*N*C)`.
    pub j: f64,
    pub batches: usize,
    pub tokens_per_batch: usize,
    pub channels: usize,
    /// Per-channel max |x| over the batch.
    pub channel_max_abs: Vec<f64>,
    pub frac_above_5: f64,
    pub frac_above_10: f64,
    pub frac_above_100: f64,
    /// Largest |x| in the batch.
    pub peak: f64,
}

/// Single-pass J metric plus outlier profile.
pub fn compute_j(x: &ActivationBatch) -> LayerStats {
    let tokens = x.tokens();
    let channels = x.channels();
    let mut sum_sq = 0.0f64;
    let mut channel_max_abs = vec![0.0f64; channels];
    let (mut n5, mut n10, mut n100) = (0usize, 0usize, 0usize);
    let mut peak = 0.0f64;
    for row in tokens.rows() {
        for (c, &v) in row.iter().enumerate() {
            sum_sq += v * v;
            let a = v.abs();
            if a > channel_max_abs[c] {
                channel_max_abs[c] = a;
            }
            if a > peak {
                peak = a;
            }
            if a > 5.0 {
                n5 += 1;
            }
            if a > 10.0 {
                n10 += 1;
            }
            if a > 100.0 {
                n100 += 1;
            }
        }
    }
    let count = x.element_count() as f64;
    LayerStats {
        j: sum_sq.sqrt() / count.sqrt(),
        batches: x.batches(),
        tokens_per_batch: x.tokens_per_batch(),
        channels,
        channel_max_abs,
        frac_above_5: n5 as f64 / count,
        frac_above_10: n10 as f64 / count,
        frac_above_100: n100 as f64 / count,
        peak,
    }
}

// ── Block-diagonal orthogonal transforms ────────────────────────────────────

/// Block-diagonal square matrix; identity blocks are stored implicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiag {
    /// (start column, block) per block; identity blocks hold `None`.
    blocks: Vec<(usize, usize, Option<Array2<f64>>)>,
    channels: usize,
}

impl BlockDiag {
    fn new(blocks: Vec<(usize, usize, Option<Array2<f64>>)>) -> Self {
        let channels = blocks.iter().map(|(_, size, _)| size).sum();
        Self { blocks, channels }
    }

    pub fn identity(channels: usize) -> Self {
        Self::new(vec![(0, channels, None)])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_identity(&self) -> bool {
        self.blocks.iter().all(|(_, _, b)| b.is_none())
    }

    /// Iterate `(start, size, block)`; identity blocks yield `None`.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, Option<&Array2<f64>>)> {
        self.blocks
            .iter()
            .map(|(start, size, b)| (*start, *size, b.as_ref()))
    }

    /// Rebuild from explicit parts (container loading).
    pub fn from_blocks(parts: Vec<(usize, usize, Option<Array2<f64>>)>) -> Result<Self> {
        let mut expect = 0usize;
        for (start, size, block) in &parts {
            if *start != expect || *size == 0 {
                return Err(Error::DimMismatch(
                    "block-diagonal parts are not contiguous".into(),
                ));
            }
            if let Some(b) = block {
                if b.dim() != (*size, *size) {
                    return Err(Error::DimMismatch(format!(
                        "block at {start} is {:?}, declared size {size}",
                        b.dim()
                    )));
                }
            }
            expect += size;
        }
        Ok(Self::new(parts))
    }

    /// `x * B` (columns transformed block by block).
    pub fn apply_right(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.channels {
            return Err(Error::DimMismatch(format!(
                "transform expects {} channels, input has {}",
                self.channels,
                x.ncols()
            )));
        }
        let mut out = x.clone();
        for (start, size, block) in &self.blocks {
            if let Some(b) = block {
                let sub = x.slice(s![.., *start..start + size]).dot(b);
                out.slice_mut(s![.., *start..start + size]).assign(&sub);
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::<f64>::eye(self.channels);
        for (start, size, block) in &self.blocks {
            if let Some(b) = block {
                m.slice_mut(s![*start..start + size, *start..start + size])
                    .assign(b);
            }
        }
        m
    }

    /// Worst-case `|B B^T - I|` entry over all blocks.
    pub fn orthogonality_deviation(&self) -> f64 {
        self.blocks
            .iter()
            .filter_map(|(_, _, b)| b.as_ref())
            .map(|b| orthogonality_deviation(b))
            .fold(0.0, f64::max)
    }
}

/// `max |M M^T - I|` entrywise.
pub fn orthogonality_deviation(m: &Array2<f64>) -> f64 {
    let gram = m.dot(&m.t());
    let mut worst = 0.0f64;
    for ((r, c), &v) in gram.indexed_iter() {
        let target = if r == c { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst
}

fn snap_f32(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| v as f32 as f64);
}

/// Normalized Sylvester–Hadamard matrix; `n` must be a power of two.
fn sylvester(n: usize) -> Array2<f64> {
    debug_assert!(n.is_power_of_two());
    let mut signs = Array2::<i8>::zeros((n, n));
    signs[[0, 0]] = 1;
    let mut size = 1;
    while size < n {
        for r in 0..size {
            for c in 0..size {
                let v = signs[[r, c]];
                signs[[r, c + size]] = v;
                signs[[r + size, c]] = v;
                signs[[r + size, c + size]] = -v;
            }
        }
        size *= 2;
    }
    let scale = 1.0 / (n as f64).sqrt();
    let mut m = signs.mapv(|v| v as f64 * scale);
    snap_f32(&mut m);
    m
}

/// Orthogonal Hadamard-style matrix with entries `±1/sqrt(block)`; powers of
/// two use the Sylvester construction directly, other sizes fall back to a
/// block-diagonal composition of power-of-two Sylvester blocks.
pub fn hadamard_matrix(n: usize) -> Result<Array2<f64>> {
    Ok(hadamard_blocks(n)?.to_dense())
}

/// Block-diagonal Hadamard transform covering `n` channels.
pub fn hadamard_blocks(n: usize) -> Result<BlockDiag> {
    if n == 0 {
        return Err(Error::InvalidParam(
            "Hadamard dimension 0 is unsupported; sizes >= 1 are composed from \
             power-of-two Sylvester blocks"
                .into(),
        ));
    }
    let mut blocks = Vec::new();
    let mut start = 0usize;
    let mut rem = n;
    while rem > 0 {
        let size = 1usize << (usize::BITS - 1 - rem.leading_zeros());
        blocks.push((start, size, Some(sylvester(size))));
        start += size;
        rem -= size;
    }
    Ok(BlockDiag::new(blocks))
}

// ── Greedy outlier-aware rotation ───────────────────────────────────────────

/// Channel-block partition: full `block_size` chunks, then the largest power
/// of two that fits the remainder, then identity padding.
fn block_partition(channels: usize, block_size: usize) -> Result<Vec<(usize, usize, bool)>> {
    if channels == 0 {
        return Err(Error::EmptyInput("no channels to partition".into()));
    }
    if block_size == 0 || !block_size.is_power_of_two() {
        return Err(Error::InvalidParam(format!(
            "block size must be a power of two, got {block_size}"
        )));
    }
    let mut parts = Vec::new();
    let mut start = 0usize;
    while channels - start >= block_size {
        parts.push((start, block_size, true));
        start += block_size;
    }
    let rem = channels - start;
    if rem > 0 {
        let pow = 1usize << (usize::BITS - 1 - rem.leading_zeros());
        parts.push((start, pow, true));
        if rem > pow {
            parts.push((start + pow, rem - pow, false));
        }
    }
    Ok(parts)
}

/// Accepted-step record for one block of the greedy rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub start: usize,
    pub size: usize,
    /// Block max-abs after each accepted step; first entry is the initial
    /// value, so the sequence is strictly decreasing.
    pub max_abs: Vec<f64>,
}

fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()))
}

/// `E_{c*} S E_{c*}`: the spreading matrix with channel 0 and `c_star`
/// exchanged on both sides.
fn swapped_spread(spread: &Array2<f64>, c_star: usize) -> Array2<f64> {
    let mut m = spread.clone();
    if c_star != 0 {
        for j in 0..m.ncols() {
            m.swap([0, j], [c_star, j]);
        }
        for i in 0..m.nrows() {
            m.swap([i, 0], [i, c_star]);
        }
    }
    m
}

fn greedy_block(data: &Array2<f64>, steps_k: usize) -> (Array2<f64>, Vec<f64>) {
    let n = data.ncols();
    let spread = sylvester(n);
    let mut current = data.clone();
    let mut rotation = Array2::<f64>::eye(n);
    let mut maxima = vec![max_abs(&current)];
    for _ in 0..steps_k {
        let m0 = *maxima.last().expect("nonempty");
        // channel with the largest max-abs; ties go to the lowest index
        let mut c_star = 0usize;
        let mut best = -1.0f64;
        for c in 0..n {
            let col_max = current.column(c).iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if col_max > best {
                best = col_max;
                c_star = c;
            }
        }
        let step = swapped_spread(&spread, c_star);
        let candidate = current.dot(&step);
        let m1 = max_abs(&candidate);
        if m1 < m0 {
            current = candidate;
            rotation = rotation.dot(&step);
            maxima.push(m1);
        } else {
            break; // first rejected step ends the block
        }
    }
    snap_f32(&mut rotation);
    (rotation, maxima)
}

/// Greedy outlier-aware rotation over calibration activations.
pub fn greedy_rotation(
    x_cal: &ActivationBatch,
    block_size: usize,
    steps_k: usize,
) -> Result<BlockDiag> {
    Ok(greedy_rotation_traced(x_cal, block_size, steps_k)?.0)
}

/// Greedy rotation along with the per-block accepted max-abs sequences.
pub fn greedy_rotation_traced(
    x_cal: &ActivationBatch,
    block_size: usize,
    steps_k: usize,
) -> Result<(BlockDiag, Vec<BlockTrace>)> {
    let tokens = x_cal.tokens();
    let parts = block_partition(x_cal.channels(), block_size)?;
    let mut blocks = Vec::with_capacity(parts.len());
    let mut traces = Vec::with_capacity(parts.len());
    for (start, size, rotate) in parts {
        let data = tokens.slice(s![.., start..start + size]).to_owned();
        if !rotate || size == 1 {
            traces.push(BlockTrace {
                start,
                size,
                max_abs: vec![max_abs(&data)],
            });
            blocks.push((start, size, None));
            continue;
        }
        let (rotation, maxima) = greedy_block(&data, steps_k);
        traces.push(BlockTrace {
            start,
            size,
            max_abs: maxima,
        });
        let block = if rotation == Array2::<f64>::eye(size) {
            None
        } else {
            Some(rotation)
        };
        blocks.push((start, size, block));
    }
    Ok((BlockDiag::new(blocks), traces))
}

// ── Zigzag channel permutation ──────────────────────────────────────────────

/// Channel order balancing per-block value ranges: channels are sorted by
/// descending range and dealt across blocks in serpentine order (forward,
/// then reverse, alternating). `perm[j]` is the original channel placed at
/// position `j`. All-equal ranges keep the original order.
pub fn zigzag_permutation(x_cal: &ActivationBatch, block_size: usize) -> Result<Vec<usize>> {
    let tokens = x_cal.tokens();
    let channels = x_cal.channels();
    let parts = block_partition(channels, block_size)?;

    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); channels];
    for row in tokens.rows() {
        for (c, &v) in row.iter().enumerate() {
            let (lo, hi) = &mut ranges[c];
            *lo = lo.min(v);
            *hi = hi.max(v);
        }
    }
    let ranges: Vec<f64> = ranges.into_iter().map(|(lo, hi)| hi - lo).collect();

    // No range information: any valid permutation works, identity is free.
    if ranges.iter().all(|&r| r == ranges[0]) {
        return Ok((0..channels).collect());
    }

    let mut sorted: Vec<usize> = (0..channels).collect();
    sorted.sort_by(|&a, &b| ranges[b].total_cmp(&ranges[a]).then(a.cmp(&b)));

    let capacities: Vec<usize> = parts.iter().map(|&(_, size, _)| size).collect();
    let mut dealt: Vec<Vec<usize>> = capacities.iter().map(|&c| Vec::with_capacity(c)).collect();
    let mut next = sorted.into_iter();
    let mut forward = true;
    'deal: loop {
        let order: Vec<usize> = if forward {
            (0..dealt.len()).collect()
        } else {
            (0..dealt.len()).rev().collect()
        };
        let mut placed = false;
        for b in order {
            if dealt[b].len() < capacities[b] {
                match next.next() {
                    Some(ch) => {
                        dealt[b].push(ch);
                        placed = true;
                    }
                    None => break 'deal,
                }
            }
        }
        if !placed {
            break;
        }
        forward = !forward;
    }
    Ok(dealt.into_iter().flatten().collect())
}

/// Reorder columns: `out[:, j] = x[:, perm[j]]`.
pub fn apply_permutation(x: &Array2<f64>, perm: &[usize]) -> Result<Array2<f64>> {
    if perm.len() != x.ncols() {
        return Err(Error::DimMismatch(format!(
            "permutation over {} channels applied to {} columns",
            perm.len(),
            x.ncols()
        )));
    }
    let mut out = Array2::<f64>::zeros(x.dim());
    for (j, &src) in perm.iter().enumerate() {
        out.column_mut(j).assign(&x.column(src));
    }
    Ok(out)
}

/// Dense 0/1 matrix `P` with `x * P == apply_permutation(x, perm)`.
pub fn permutation_matrix(perm: &[usize]) -> Array2<f64> {
    let n = perm.len();
    let mut p = Array2::<f64>::zeros((n, n));
    for (j, &src) in perm.iter().enumerate() {
        p[[src, j]] = 1.0;
    }
    p
}

pub fn is_valid_permutation(perm: &[usize]) -> bool {
    let n = perm.len();
    let mut seen = vec![false; n];
    perm.iter().all(|&i| {
        if i < n && !seen[i] {
            seen[i] = true;
            true
        } else {
            false
        }
    })
}

// ── Rotation plans ──────────────────────────────────────────────────────────

/// `R̂1 * P * R̂2` of the dual branch.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTransform {
    pub r1: BlockDiag,
    pub perm: Vec<usize>,
    pub r2: BlockDiag,
}

/// Greedy rotation, then zigzag permutation on the rotated calibration data,
/// then a second greedy rotation after the permutation.
pub fn build_dual_transform(
    x_cal: &ActivationBatch,
    block_size: usize,
    steps_k: usize,
) -> Result<DualTransform> {
    let r1 = greedy_rotation(x_cal, block_size, steps_k)?;
    let x1 = x_cal.with_tokens(r1.apply_right(x_cal.tokens())?)?;
    let perm = zigzag_permutation(&x1, block_size)?;
    let x2 = x1.with_tokens(apply_permutation(x1.tokens(), &perm)?)?;
    let r2 = greedy_rotation(&x2, block_size, steps_k)?;
    Ok(DualTransform { r1, perm, r2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationKind {
    Identity,
    Hadamard,
    Dual,
}

impl std::fmt::Display for RotationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RotationKind::Identity => "identity",
            RotationKind::Hadamard => "hadamard",
            RotationKind::Dual => "dual",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Identity,
    /// Full-width Hadamard; regenerated deterministically from `channels`.
    Hadamard,
    Dual(DualTransform),
}

/// Which operand a plan is applied to. Both sides right-multiply by the same
/// composite; the enum only drives validation and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Activations,
    Weights,
}

/// Frozen per-layer transform decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationPlan {
    pub channels: usize,
    pub block_size: usize,
    /// Dispatch threshold the plan was selected under.
    pub threshold: f64,
    /// J value observed on the calibration activations.
    pub j_observed: f64,
    pub transform: Transform,
}

impl RotationPlan {
    pub fn identity(channels: usize, block_size: usize, threshold: f64, j: f64) -> Self {
        Self {
            channels,
            block_size,
            threshold,
            j_observed: j,
            transform: Transform::Identity,
        }
    }

    pub fn kind(&self) -> RotationKind {
        match self.transform {
            Transform::Identity => RotationKind::Identity,
            Transform::Hadamard => RotationKind::Hadamard,
            Transform::Dual(_) => RotationKind::Dual,
        }
    }

    /// Right-multiply a tensor by the plan's composite transform.
    pub fn apply(&self, t: &Array2<f64>, side: Side) -> Result<Array2<f64>> {
        if t.ncols() != self.channels {
            return Err(Error::DimMismatch(format!(
                "{} have {} channels, plan expects {}",
                match side {
                    Side::Activations => "activations",
                    Side::Weights => "weights",
                },
                t.ncols(),
                self.channels
            )));
        }
        match &self.transform {
            Transform::Identity => Ok(t.clone()),
            Transform::Hadamard => hadamard_blocks(self.channels)?.apply_right(t),
            Transform::Dual(d) => {
                let x1 = d.r1.apply_right(t)?;
                let x2 = apply_permutation(&x1, &d.perm)?;
                d.r2.apply_right(&x2)
            }
        }
    }

    /// Worst orthogonality deviation over the plan's stored matrices.
    pub fn orthogonality_deviation(&self) -> f64 {
        match &self.transform {
            Transform::Identity | Transform::Hadamard => 0.0,
            Transform::Dual(d) => d
                .r1
                .orthogonality_deviation()
                .max(d.r2.orthogonality_deviation()),
        }
    }
}

/// Eq.-11 dispatch: J below the threshold takes the Hadamard branch, J at or
/// above it the dual branch.
pub fn select_rotation_plan(
    stats: &LayerStats,
    threshold: f64,
    x_cal: &ActivationBatch,
    block_size: usize,
    steps_k: usize,
) -> Result<RotationPlan> {
    if x_cal.channels() != stats.channels {
        return Err(Error::DimMismatch(format!(
            "stats cover {} channels, calibration batch has {}",
            stats.channels,
            x_cal.channels()
        )));
    }
    let transform = if stats.j < threshold {
        Transform::Hadamard
    } else {
        Transform::Dual(build_dual_transform(x_cal, block_size, steps_k)?)
    };
    Ok(RotationPlan {
        channels: stats.channels,
        block_size,
        threshold,
        j_observed: stats.j,
        transform,
    })
}

/// Apply a plan to activations or (transposed-compensated) weights.
pub fn apply_rotation(t: &Array2<f64>, plan: &RotationPlan, side: Side) -> Result<Array2<f64>> {
    plan.apply(t, side)
}

// ── Smoothing migration ─────────────────────────────────────────────────────

/// Per-input-channel difficulty migration scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingVector {
    pub d: Vec<f64>,
    pub migration_strength: f64,
}

impl SmoothingVector {
    pub fn unit(channels: usize, strength: f64) -> Self {
        Self {
            d: vec![1.0; channels],
            migration_strength: strength,
        }
    }

    pub fn is_unit(&self) -> bool {
        self.d.iter().all(|&v| v == 1.0)
    }

    /// `X' = X * diag(d)^-1`.
    pub fn apply_activations(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.scale_columns(x, |v, d| v / d)
    }

    /// `W' = W * diag(d)`.
    pub fn apply_weights(&self, w: &Array2<f64>) -> Result<Array2<f64>> {
        self.scale_columns(w, |v, d| v * d)
    }

    fn scale_columns(
        &self,
        m: &Array2<f64>,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array2<f64>> {
        if m.ncols() != self.d.len() {
            return Err(Error::DimMismatch(format!(
                "smoothing vector covers {} channels, tensor has {} columns",
                self.d.len(),
                m.ncols()
            )));
        }
        let mut out = m.clone();
        for (c, &d) in self.d.iter().enumerate() {
            out.column_mut(c).mapv_inplace(|v| f(v, d));
        }
        Ok(out)
    }
}

/// Compute migration scales `d_j = max|X_j|^s / max|W_j|^(1-s)` and apply
/// them: activations divided, weights multiplied, product preserved.
pub fn smooth_migrate(
    x_cal: &ActivationBatch,
    w: &WeightMatrix,
    strength: f64,
) -> Result<(SmoothingVector, ActivationBatch, WeightMatrix)> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidParam(format!(
            "migration strength must be in [0, 1], got {strength}"
        )));
    }
    if w.ncols() != x_cal.channels() {
        return Err(Error::DimMismatch(format!(
            "weights have {} input channels, activations {}",
            w.ncols(),
            x_cal.channels()
        )));
    }
    let channels = x_cal.channels();
    let mut d = Vec::with_capacity(channels);
    for c in 0..channels {
        let ax = x_cal
            .tokens()
            .column(c)
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()))
            .max(SMOOTH_EPS);
        let aw = w
            .column(c)
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()))
            .max(SMOOTH_EPS);
        d.push(pow(ax, strength) / pow(aw, 1.0 - strength));
    }
    let smoothing = SmoothingVector {
        d,
        migration_strength: strength,
    };
    let x_out = x_cal.with_tokens(smoothing.apply_activations(x_cal.tokens())?)?;
    let w_out = smoothing.apply_weights(w)?;
    Ok((smoothing, x_out, w_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::synth::{gen_activations, SyntheticActivationSpec};
    use crate::uniquant::{per_token_dequantize, per_token_quantize};
    use ndarray::arr2;
    use proptest::prelude::*;

    fn ones_batch(b: usize, n: usize, c: usize) -> ActivationBatch {
        ActivationBatch::new(b, n, Array2::from_elem((b * n, c), 1.0)).unwrap()
    }

    fn random_batch(tokens: usize, channels: usize, sigma: f64, seed: u64) -> ActivationBatch {
        gen_activations(&SyntheticActivationSpec {
            batches: 1,
            tokens_per_batch: tokens,
            channels,
            sigma,
            channel_scales: vec![],
            seed,
        })
        .unwrap()
    }

    #[test]
    fn j_of_all_ones_is_exactly_one() {
        for (b, n, c) in [(1, 1, 1), (2, 3, 5), (4, 16, 7)] {
            assert_eq!(compute_j(&ones_batch(b, n, c)).j, 1.0);
        }
    }

    #[test]
    fn j_of_zeros_is_zero() {
        let x = ActivationBatch::new(1, 2, Array2::zeros((2, 3))).unwrap();
        assert_eq!(compute_j(&x).j, 0.0);
    }

    #[test]
    fn j_scales_homogeneously() {
        let x = random_batch(8, 16, 1.0, 5);
        let j1 = compute_j(&x).j;
        let scaled = x.with_tokens(x.tokens() * 3.0).unwrap();
        let j3 = compute_j(&scaled).j;
        assert!((j3 - 3.0 * j1).abs() <= 1e-12 * j3);
    }

    #[test]
    fn outlier_profile_counts_strictly_above() {
        let x = ActivationBatch::from_tokens(arr2(&[[1.0, 6.0, -12.0, 245.0]])).unwrap();
        let stats = compute_j(&x);
        assert_eq!(stats.frac_above_5, 3.0 / 4.0);
        assert_eq!(stats.frac_above_10, 2.0 / 4.0);
        assert_eq!(stats.frac_above_100, 1.0 / 4.0);
        assert_eq!(stats.peak, 245.0);
        assert_eq!(stats.channel_max_abs, vec![1.0, 6.0, 12.0, 245.0]);
    }

    #[test]
    fn hadamard_base_case() {
        let h = hadamard_matrix(2).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        let r = r as f32 as f64;
        assert_eq!(h, arr2(&[[r, r], [r, -r]]));
    }

    #[test]
    fn hadamard_halves_a_one_hot_outlier() {
        let h = hadamard_matrix(2).unwrap();
        let x = arr2(&[[100.0, 0.0]]);
        let y = x.dot(&h);
        assert!((y[[0, 0]] - 70.710678).abs() < 1e-4);
        assert!((y[[0, 1]] - 70.710678).abs() < 1e-4);
    }

    #[test]
    fn hadamard_orthogonality_at_64() {
        let h = hadamard_matrix(64).unwrap();
        assert!(orthogonality_deviation(&h) < 1e-6);
    }

    #[test]
    fn hadamard_non_power_of_two_composes_blocks() {
        let h = hadamard_matrix(12).unwrap();
        assert_eq!(h.dim(), (12, 12));
        assert!(orthogonality_deviation(&h) < 1e-6);
        assert!(hadamard_matrix(0).is_err());
    }

    #[test]
    fn greedy_spreads_a_one_hot_peak() {
        let x = ActivationBatch::from_tokens(arr2(&[[0.0, 0.0, 245.0, 0.0]])).unwrap();
        let (rot, traces) = greedy_rotation_traced(&x, 4, 16).unwrap();
        let y = rot.apply_right(x.tokens()).unwrap();
        for &v in y.iter() {
            assert_eq!(v.abs(), 122.5);
        }
        assert_eq!(traces[0].max_abs[0], 245.0);
        assert_eq!(traces[0].max_abs[1], 122.5);
    }

    #[test]
    fn greedy_rejects_on_already_uniform_block() {
        let x = ones_batch(1, 1, 4);
        let (rot, traces) = greedy_rotation_traced(&x, 4, 16).unwrap();
        assert!(rot.is_identity());
        assert_eq!(traces[0].max_abs.len(), 1);
    }

    #[test]
    fn greedy_decreases_strictly_and_stays_orthogonal() {
        let mut x = random_batch(16, 8, 1.0, 17);
        let mut t = x.tokens().clone();
        t.column_mut(3).mapv_inplace(|v| v * 40.0);
        x = x.with_tokens(t).unwrap();
        let (rot, traces) = greedy_rotation_traced(&x, 8, 8).unwrap();
        for trace in &traces {
            for w in trace.max_abs.windows(2) {
                assert!(w[1] < w[0], "accepted step must strictly decrease");
            }
        }
        assert!(traces[0].max_abs.len() > 1, "dominant channel should trigger a step");
        assert!(rot.orthogonality_deviation() < 1e-5);
    }

    #[test]
    fn zigzag_deals_serpentine() {
        // ranges [9, 8, 2, 1], two blocks of two
        let x = ActivationBatch::from_tokens(arr2(&[
            [0.0, 0.0, 0.0, 0.0],
            [9.0, 8.0, 2.0, 1.0],
        ]))
        .unwrap();
        let perm = zigzag_permutation(&x, 2).unwrap();
        assert_eq!(perm, vec![0, 3, 1, 2]);
    }

    #[test]
    fn zigzag_all_equal_ranges_is_identity() {
        let x = ones_batch(1, 3, 6);
        assert_eq!(zigzag_permutation(&x, 2).unwrap(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn zigzag_balances_block_max_ranges() {
        let x = random_batch(32, 128, 1.0, 23);
        let perm = zigzag_permutation(&x, 32).unwrap();
        assert!(is_valid_permutation(&perm));
        let ranges: Vec<f64> = (0..128)
            .map(|c| {
                let col = x.tokens().column(c);
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &v in col.iter() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                hi - lo
            })
            .collect();
        let block_max = |order: &[usize]| -> Vec<f64> {
            order
                .chunks(32)
                .map(|chunk| chunk.iter().map(|&c| ranges[c]).fold(0.0f64, f64::max))
                .collect()
        };
        let variance = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64
        };
        let identity: Vec<usize> = (0..128).collect();
        assert!(variance(&block_max(&perm)) <= variance(&block_max(&identity)));
    }

    #[test]
    fn dual_transform_on_flat_data_is_identity() {
        let x = ones_batch(2, 4, 8);
        let d = build_dual_transform(&x, 8, 16).unwrap();
        assert!(d.r1.is_identity());
        assert!(d.r2.is_identity());
        assert_eq!(d.perm, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn dual_transform_reduces_per_token_quant_mse() {
        let spec = SyntheticActivationSpec {
            batches: 2,
            tokens_per_batch: 16,
            channels: 32,
            sigma: 1.0,
            channel_scales: vec![(3, 60.0), (17, 45.0)],
            seed: 31,
        };
        let x_cal = gen_activations(&spec).unwrap();
        let x_fresh = gen_activations(&SyntheticActivationSpec { seed: 32, ..spec }).unwrap();
        let d = build_dual_transform(&x_cal, 32, 16).unwrap();

        let mse_of = |x: &ActivationBatch| {
            let q = per_token_quantize(x, 4).unwrap();
            let back = per_token_dequantize(&q).unwrap();
            (&back - x.tokens()).mapv(|e| e * e).mean().unwrap()
        };
        let rotated = x_fresh
            .with_tokens({
                let x1 = d.r1.apply_right(x_fresh.tokens()).unwrap();
                let x2 = apply_permutation(&x1, &d.perm).unwrap();
                d.r2.apply_right(&x2).unwrap()
            })
            .unwrap();
        assert!(mse_of(&rotated) <= mse_of(&x_fresh));
    }

    #[test]
    fn dual_composite_is_orthogonal() {
        let x = random_batch(16, 16, 2.0, 41);
        let d = build_dual_transform(&x, 8, 16).unwrap();
        let dense = d
            .r1
            .to_dense()
            .dot(&permutation_matrix(&d.perm))
            .dot(&d.r2.to_dense());
        assert!(orthogonality_deviation(&dense) < 1e-5);
    }

    #[test]
    fn dispatch_follows_threshold_with_boundary_to_dual() {
        let half = ActivationBatch::new(1, 2, Array2::from_elem((2, 4), 0.5)).unwrap();
        let stats = compute_j(&half);
        assert_eq!(stats.j, 0.5);
        let plan = select_rotation_plan(&stats, 1.0, &half, 4, 4).unwrap();
        assert_eq!(plan.kind(), RotationKind::Hadamard);

        let ones = ones_batch(1, 2, 4);
        let stats = compute_j(&ones);
        assert_eq!(stats.j, 1.0);
        let plan = select_rotation_plan(&stats, 1.0, &ones, 4, 4).unwrap();
        assert_eq!(plan.kind(), RotationKind::Dual);

        let piles = ones.with_tokens(ones.tokens() * 1.5).unwrap();
        let stats = compute_j(&piles);
        let plan = select_rotation_plan(&stats, 1.0, &piles, 4, 4).unwrap();
        assert_eq!(plan.kind(), RotationKind::Dual);
    }

    #[test]
    fn identity_plan_leaves_input_unchanged() {
        let plan = RotationPlan::identity(4, 4, 1.0, 0.0);
        let x = arr2(&[[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(plan.apply(&x, Side::Activations).unwrap(), x);
    }

    #[test]
    fn hadamard_plan_preserves_matmul() {
        let x = random_batch(8, 16, 1.0, 51);
        let w = random_batch(6, 16, 0.2, 52).tokens().clone();
        let plan = RotationPlan {
            channels: 16,
            block_size: 16,
            threshold: 1.0,
            j_observed: 0.5,
            transform: Transform::Hadamard,
        };
        let reference = x.tokens().dot(&w.t());
        let xr = plan.apply(x.tokens(), Side::Activations).unwrap();
        let wr = plan.apply(&w, Side::Weights).unwrap();
        let rotated = xr.dot(&wr.t());
        let num = (&rotated - &reference).mapv(|e| e * e).sum().sqrt();
        let den = reference.mapv(|e| e * e).sum().sqrt();
        assert!(num / den < 1e-5);
    }

    #[test]
    fn dual_plan_eliminates_salient_fraction() {
        // one salient channel pushes ~0.8% of values above 100
        let spec = SyntheticActivationSpec {
            batches: 1,
            tokens_per_batch: 64,
            channels: 128,
            sigma: 1.0,
            channel_scales: vec![(26, 200.0)],
            seed: 61,
        };
        let x = gen_activations(&spec).unwrap();
        let before = x.tokens().iter().filter(|v| v.abs() > 100.0).count();
        assert!(before > 0);
        let stats = compute_j(&x);
        let plan = select_rotation_plan(&stats, 1.0, &x, 128, 16).unwrap();
        assert_eq!(plan.kind(), RotationKind::Dual);
        let y = plan.apply(x.tokens(), Side::Activations).unwrap();
        let after = y.iter().filter(|v| v.abs() > 100.0).count();
        assert_eq!(after, 0);
    }

    #[test]
    fn smoothing_direct_formula() {
        let x = ActivationBatch::from_tokens(arr2(&[[4.0, -1.0], [2.0, 0.5]])).unwrap();
        let w = arr2(&[[1.0, 4.0], [0.5, -2.0]]);
        let (sm, _, _) = smooth_migrate(&x, &w, 0.5).unwrap();
        assert_eq!(sm.d, vec![2.0, 0.5]);
    }

    #[test]
    fn smoothing_strength_zero_uses_weight_maxima() {
        let x = ActivationBatch::from_tokens(arr2(&[[4.0, -1.0]])).unwrap();
        let w = arr2(&[[2.0, 4.0]]);
        let (sm, xs, ws) = smooth_migrate(&x, &w, 0.0).unwrap();
        assert_eq!(sm.d, vec![0.5, 0.25]);
        let before = x.tokens().dot(&w.t());
        let after = xs.tokens().dot(&ws.t());
        let num = (&after - &before).mapv(|e| e * e).sum().sqrt();
        let den = before.mapv(|e| e * e).sum().sqrt();
        assert!(num / den < 1e-6);
    }

    #[test]
    fn smoothing_handles_dead_channels() {
        let x = ActivationBatch::from_tokens(arr2(&[[0.0, 1.0]])).unwrap();
        let w = arr2(&[[0.0, 1.0]]);
        let (sm, _, _) = smooth_migrate(&x, &w, 0.5).unwrap();
        assert!(sm.d.iter().all(|&v| v.is_finite() && v > 0.0));
    }

    proptest! {
        #[test]
        fn smoothing_preserves_product(
            seed in 0u64..200,
            strength in 0.0f64..=1.0,
        ) {
            let x = random_batch(6, 10, 2.0, seed);
            let w = random_batch(4, 10, 0.3, seed + 1000).tokens().clone();
            let before = x.tokens().dot(&w.t());
            let (_, xs, ws) = smooth_migrate(&x, &w, strength).unwrap();
            let after = xs.tokens().dot(&ws.t());
            let num = (&after - &before).mapv(|e| e * e).sum().sqrt();
            let den = before.mapv(|e| e * e).sum().sqrt().max(1e-30);
            prop_assert!(num / den < 1e-6);
        }

        #[test]
        fn plans_preserve_matmul_for_every_kind(
            seed in 0u64..100,
            kind in 0usize..3,
        ) {
            let x_cal = random_batch(8, 16, 1.5, seed);
            let transform = match kind {
                0 => Transform::Identity,
                1 => Transform::Hadamard,
                _ => Transform::Dual(build_dual_transform(&x_cal, 8, 8).unwrap()),
            };
            let plan = RotationPlan {
                channels: 16, block_size: 8, threshold: 1.0, j_observed: 0.0, transform,
            };
            let x = random_batch(5, 16, 1.0, seed + 7).tokens().clone();
            let w = random_batch(3, 16, 0.1, seed + 13).tokens().clone();
            let reference = x.dot(&w.t());
            let xr = plan.apply(&x, Side::Activations).unwrap();
            let wr = plan.apply(&w, Side::Weights).unwrap();
            let num = (&xr.dot(&wr.t()) - &reference).mapv(|e| e * e).sum().sqrt();
            let den = reference.mapv(|e| e * e).sum().sqrt().max(1e-30);
            prop_assert!(num / den < 1e-5);
        }
    }
}
