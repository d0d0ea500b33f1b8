//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test -p lrq-core --test acceptance -- --nocapture` to see
//! every line.

use std::time::Instant;

use ndarray::Array2;

use lrq_core::batch::ActivationBatch;
use lrq_core::intpipe::{integerize, residual_error_bound, shift_matmul, ShiftConfig};
use lrq_core::math::exp2;
use lrq_core::pipeline::{run_ablation, QuantConfig};
use lrq_core::rotation::{
    compute_j, greedy_rotation_traced, select_rotation_plan, smooth_migrate, RotationKind, Side,
    Transform,
};
use lrq_core::tensorio::{
    gen_activations, gen_gaussian_longtail, SyntheticActivationSpec, SyntheticSpec,
};
use lrq_core::twinlog::{
    clip_grid_search, tlq_dequantize, tlq_dequantize_channel, tlq_quantize_channel,
    tlq_quantize_matrix, ClipGrid,
};
use lrq_core::uniquant::{
    per_token_dequantize, per_token_quantize, uniform_dequantize_matrix, uniform_quantize_matrix,
};

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

/// 1. Twin-log dominance over per-channel uniform at 3 bits on the
/// long-tail corpus: >= 95% of 50 seeded matrices, under 60 s.
#[test]
fn criterion_01_twinlog_dominance() {
    let start = Instant::now();
    let grid = ClipGrid::default();
    let mut wins = 0usize;
    for seed in 0..50u64 {
        let w = gen_gaussian_longtail(&SyntheticSpec {
            rows: 128,
            cols: 128,
            sigma: 0.02,
            tail_fraction: 0.01,
            tail_scale: 8.0,
            seed,
        })
        .unwrap();
        let tlq = tlq_quantize_matrix(&w, 3, &grid).unwrap();
        let tlq_err = frob(&(&tlq_dequantize(&tlq).unwrap() - &w));
        let ua = uniform_quantize_matrix(&w, 3).unwrap();
        let uni_err = frob(&(&uniform_dequantize_matrix(&ua).unwrap() - &w));
        if tlq_err < uni_err {
            wins += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = wins >= 48 && elapsed.as_secs_f64() < 60.0;
    verdict(
        "01 twin-log dominance",
        pass,
        &format!("{wins}/50 wins, {:.1}s", elapsed.as_secs_f64()),
    );
}

/// 2. Channels whose per-side log-magnitudes form full-budget arithmetic
/// progressions round-trip bit-exactly at alpha = beta = 1.
#[test]
fn criterion_02_progression_exactness() {
    let mut checked = 0usize;
    let mut exact = 0usize;
    for i in 0..100usize {
        let bits = 3 + (i % 2) as u32;
        let pos_levels = 1usize << (bits - 1); // codes 0 ..= 2^(b-1)-1
        let neg_levels = (1usize << (bits - 1)) + 1; // codes 0 ..= 2^(b-1)
        let d_pos = 1 + (i % 3) as i64;
        let d_neg = 1 + ((i / 3) % 3) as i64;
        let m_pos = -10 + (i % 7) as i64;
        let m_neg = -8 + ((i / 7) % 5) as i64;
        let mut w = Vec::new();
        for k in 0..pos_levels as i64 {
            w.push(exp2((d_pos * (m_pos + k)) as f64));
        }
        for k in 0..neg_levels as i64 {
            w.push(-exp2((d_neg * (m_neg + k)) as f64));
        }
        // interleave deterministically so sides are not contiguous
        if i % 2 == 0 {
            let shift = i % w.len();
            w.rotate_left(shift);
        }
        let q = tlq_quantize_channel(&w, bits, 1.0, 1.0).unwrap();
        let back = tlq_dequantize_channel(&w, bits, &q).unwrap();
        checked += 1;
        if back == w {
            exact += 1;
        }
    }
    verdict(
        "02 progression exactness",
        exact == checked,
        &format!("{exact}/{checked} channels bit-exact"),
    );
}

/// 3. Clip grid search equals exhaustive brute-force enumeration over the
/// same grid, tie-breaks included.
#[test]
fn criterion_03_clip_search_oracle() {
    let grid = ClipGrid::default();
    let mut matches = 0usize;
    for i in 0..20u64 {
        let mut w = gen_gaussian_longtail(&SyntheticSpec {
            rows: 1,
            cols: 64,
            sigma: 0.02,
            tail_fraction: 0.02,
            tail_scale: 8.0,
            seed: 300 + i,
        })
        .unwrap()
        .row(0)
        .to_vec();
        if i % 2 == 0 {
            w[(7 * i as usize) % 64] = 50.0 * 0.02; // spike echoing the clip example
        }
        let got = clip_grid_search(&w, 3, &grid).unwrap();

        // brute force: enumerate every pair, same objective, same tie-break
        let mut best: Option<(f64, f64, f64)> = None;
        for &alpha in grid.alphas() {
            for &beta in grid.betas() {
                let q = tlq_quantize_channel(&w, 3, alpha, beta).unwrap();
                let d = tlq_dequantize_channel(&w, 3, &q).unwrap();
                let mut err = 0.0;
                for (x, y) in w.iter().zip(&d) {
                    err += (y - x) * (y - x);
                }
                let take = match best {
                    None => true,
                    Some((be, ba, bb)) => {
                        err < be || (err == be && (alpha > ba || (alpha == ba && beta > bb)))
                    }
                };
                if take {
                    best = Some((err, alpha, beta));
                }
            }
        }
        let (_, ba, bb) = best.unwrap();
        if got == (ba, bb) {
            matches += 1;
        }
    }
    verdict(
        "03 clip search oracle equivalence",
        matches == 20,
        &format!("{matches}/20 exact matches"),
    );
}

/// 4. Shift pipeline stays within the analytic residual bound elementwise
/// and is bit-identical across runs, for b in {3,4} and I in {6,7,8}.
#[test]
fn criterion_04_shift_pipeline_fidelity() {
    let grid = ClipGrid::default();
    let mut pairs = 0usize;
    let mut ok = 0usize;
    for i in 0..100u64 {
        let bits = 3 + (i % 2) as u32;
        let precision = 6 + (i % 3) as u32;
        let w = gen_gaussian_longtail(&SyntheticSpec {
            rows: 8,
            cols: 8,
            sigma: 0.05,
            tail_fraction: 0.05,
            tail_scale: 6.0,
            seed: 400 + i,
        })
        .unwrap();
        let x = gen_activations(&SyntheticActivationSpec {
            batches: 1,
            tokens_per_batch: 6,
            channels: 8,
            sigma: 1.0,
            channel_scales: vec![],
            seed: 500 + i,
        })
        .unwrap();
        let tlq = tlq_quantize_matrix(&w, bits, &grid).unwrap();
        let config = ShiftConfig::new(precision).unwrap();
        let shift = integerize(&tlq, &config).unwrap();
        let q = per_token_quantize(&x, 8).unwrap();
        let y1 = shift_matmul(&shift, &q.codes, &q.params).unwrap();
        let y2 = shift_matmul(&shift, &q.codes, &q.params).unwrap();

        let w_deq = tlq_dequantize(&tlq).unwrap();
        let x_deq = per_token_dequantize(&q).unwrap();
        let reference = x_deq.dot(&w_deq.t());
        let bound = residual_error_bound(&config);
        let mut within = true;
        for ((t, o), &got) in y1.indexed_iter() {
            let mut mag = 0.0;
            for c in 0..8 {
                mag += (w_deq[[o, c]] * x_deq[[t, c]]).abs();
            }
            if (got - reference[[t, o]]).abs() > bound * mag + 1e-12 {
                within = false;
            }
        }
        pairs += 1;
        if within && y1 == y2 {
            ok += 1;
        }
    }
    verdict(
        "04 shift pipeline fidelity",
        ok == pairs,
        &format!("{ok}/{pairs} instances within bound and bit-identical"),
    );
}

/// 5. Rotation invariance: every plan kind keeps (X T)(T^T W^T) within
/// 1e-5 relative Frobenius of X W^T, for C in {64, 256, 1024}.
#[test]
fn criterion_05_rotation_invariance() {
    let mut cases = 0usize;
    let mut ok = 0usize;
    for (ci, &channels) in [64usize, 256, 1024].iter().enumerate() {
        let x_cal = gen_activations(&SyntheticActivationSpec {
            batches: 1,
            tokens_per_batch: 64,
            channels,
            sigma: 1.5,
            channel_scales: vec![(channels / 3, 60.0), (2 * channels / 3, 45.0)],
            seed: 600 + ci as u64,
        })
        .unwrap();
        let x = gen_activations(&SyntheticActivationSpec {
            batches: 1,
            tokens_per_batch: 32,
            channels,
            sigma: 1.0,
            channel_scales: vec![],
            seed: 700 + ci as u64,
        })
        .unwrap();
        let w = gen_activations(&SyntheticActivationSpec {
            batches: 1,
            tokens_per_batch: 16,
            channels,
            sigma: 0.1,
            channel_scales: vec![],
            seed: 800 + ci as u64,
        })
        .unwrap()
        .tokens()
        .clone();
        let reference = x.tokens().dot(&w.t());
        let den = frob(&reference);

        let stats = compute_j(&x_cal);
        for kind in [RotationKind::Identity, RotationKind::Hadamard, RotationKind::Dual] {
            let plan = match kind {
                RotationKind::Dual => select_rotation_plan(&stats, 0.0, &x_cal, 128, 16).unwrap(),
                RotationKind::Identity => {
                    lrq_core::rotation::RotationPlan::identity(channels, 128, 1.0, stats.j)
                }
                RotationKind::Hadamard => lrq_core::rotation::RotationPlan {
                    channels,
                    block_size: 128,
                    threshold: 1.0,
                    j_observed: stats.j,
                    transform: Transform::Hadamard,
                },
            };
            assert_eq!(plan.kind(), kind);
            let xr = plan.apply(x.tokens(), Side::Activations).unwrap();
            let wr = plan.apply(&w, Side::Weights).unwrap();
            let dev = frob(&(&xr.dot(&wr.t()) - &reference)) / den;
            cases += 1;
            if dev < 1e-5 {
                ok += 1;
            }
        }
    }
    verdict(
        "05 rotation invariance",
        ok == cases,
        &format!("{ok}/{cases} plan/dim combinations under 1e-5"),
    );
}

/// 6. Greedy contract: strictly decreasing block max-abs on accepted steps,
/// orthogonality within 1e-5, on 50 blocks with a dominant channel.
#[test]
fn criterion_06_greedy_contract() {
    let mut ok = 0usize;
    for i in 0..50u64 {
        let base = gen_activations(&SyntheticActivationSpec {
            batches: 1,
            tokens_per_batch: 16,
            channels: 32,
            sigma: 1.0,
            channel_scales: vec![(((i as usize) * 5) % 32, 40.0)],
            seed: 900 + i,
        })
        .unwrap();
        let (rot, traces) = greedy_rotation_traced(&base, 32, 16).unwrap();
        let strictly_decreasing = traces
            .iter()
            .all(|t| t.max_abs.windows(2).all(|w| w[1] < w[0]));
        let stepped = traces.iter().any(|t| t.max_abs.len() > 1);
        let orthogonal = rot.orthogonality_deviation() < 1e-5;
        if strictly_decreasing && stepped && orthogonal {
            ok += 1;
        }
    }
    verdict(
        "06 greedy contract",
        ok == 50,
        &format!("{ok}/50 blocks monotone and orthogonal"),
    );
}

/// 7. Dispatch: J(all-ones) is exactly 1; threshold 1 sends J=0.999 to
/// Hadamard and J=1.0 to the dual branch, deterministically.
#[test]
fn criterion_07_dispatch() {
    let ones = ActivationBatch::new(2, 8, Array2::from_elem((16, 16), 1.0)).unwrap();
    let stats_ones = compute_j(&ones);
    let exact_one = stats_ones.j == 1.0;

    let low = ActivationBatch::new(2, 8, Array2::from_elem((16, 16), 0.999)).unwrap();
    let stats_low = compute_j(&low);

    let mut deterministic = true;
    let mut low_kind = None;
    let mut boundary_kind = None;
    for _ in 0..3 {
        let plan_low = select_rotation_plan(&stats_low, 1.0, &low, 16, 16).unwrap();
        let plan_one = select_rotation_plan(&stats_ones, 1.0, &ones, 16, 16).unwrap();
        if *low_kind.get_or_insert(plan_low.kind()) != plan_low.kind() {
            deterministic = false;
        }
        if *boundary_kind.get_or_insert(plan_one.kind()) != plan_one.kind() {
            deterministic = false;
        }
    }
    let pass = exact_one
        && low_kind == Some(RotationKind::Hadamard)
        && boundary_kind == Some(RotationKind::Dual)
        && deterministic;
    verdict(
        "07 dispatch",
        pass,
        &format!(
            "J(ones)={} (exact: {exact_one}), J=0.999 -> {:?}, J=1.0 -> {:?}",
            stats_ones.j, low_kind, boundary_kind
        ),
    );
}

/// 8. Smoothing identity at strength 0.5: relative Frobenius deviation of
/// X'W'^T from XW^T under 1e-6 on 20 random layers.
#[test]
fn criterion_08_smoothing_identity() {
    let mut ok = 0usize;
    for i in 0..20u64 {
        let x = gen_activations(&SyntheticActivationSpec {
            batches: 1,
            tokens_per_batch: 24,
            channels: 48,
            sigma: 2.0,
            channel_scales: vec![((i as usize) % 48, 30.0)],
            seed: 1000 + i,
        })
        .unwrap();
        let w = gen_gaussian_longtail(&SyntheticSpec {
            rows: 16,
            cols: 48,
            sigma: 0.02,
            tail_fraction: 0.01,
            tail_scale: 8.0,
            seed: 1100 + i,
        })
        .unwrap();
        let reference = x.tokens().dot(&w.t());
        let (_, xs, ws) = smooth_migrate(&x, &w, 0.5).unwrap();
        let dev = frob(&(&xs.tokens().dot(&ws.t()) - &reference)) / frob(&reference);
        if dev < 1e-6 {
            ok += 1;
        }
    }
    verdict(
        "08 smoothing identity",
        ok == 20,
        &format!("{ok}/20 layers under 1e-6"),
    );
}

/// 9. Ablation direction at W3A4: err(TLQ+ARS) <= err(TLQ) <= err(neither)
/// on at least 9 of 10 synthetic salient-outlier layers.
///
/// The corpus mirrors the observed outlier shape: wide layers where a
/// couple of channels carry values an order of magnitude above the rest.
/// Log-domain weight quantizers concentrate their error mass where the
/// signal mass is, so a layer can occasionally invert the middle
/// inequality; the criterion's 9-of-10 bar absorbs that.
#[test]
fn criterion_09_ablation_direction() {
    let config = QuantConfig {
        bits_w: 3,
        bits_a: 4,
        block_size: 64,
        ..QuantConfig::default()
    };
    let mut ordered = 0usize;
    for i in 0..10u64 {
        let w = gen_gaussian_longtail(&SyntheticSpec {
            rows: 48,
            cols: 128,
            sigma: 0.02,
            tail_fraction: 0.01,
            tail_scale: 8.0,
            seed: 2200 + i,
        })
        .unwrap();
        let salient = vec![
            ((17 * i as usize) % 128, 10.0),
            ((17 * i as usize + 64) % 128, 8.0),
        ];
        let x_cal = gen_activations(&SyntheticActivationSpec {
            batches: 2,
            tokens_per_batch: 16,
            channels: 128,
            sigma: 1.0,
            channel_scales: salient.clone(),
            seed: 2300 + i,
        })
        .unwrap();
        let x_eval = gen_activations(&SyntheticActivationSpec {
            batches: 2,
            tokens_per_batch: 16,
            channels: 128,
            sigma: 1.0,
            channel_scales: salient,
            seed: 2400 + i,
        })
        .unwrap();
        let cells = run_ablation(&format!("layer_{i}"), &w, &x_cal, &x_eval, &config).unwrap();
        let err = |tlq: bool, ars: bool| {
            cells
                .iter()
                .find(|e| e.tlq == tlq && e.ars == ars)
                .unwrap()
                .output_rel_err
        };
        if err(true, true) <= err(true, false) && err(true, false) <= err(false, false) {
            ordered += 1;
        }
    }
    verdict(
        "09 ablation direction",
        ordered >= 9,
        &format!("{ordered}/10 layers ordered"),
    );
}

/// 10. Per-token locality: perturbing one token never changes another
/// token's parameters or round-trip error; exhaustive on an 8-token batch.
#[test]
fn criterion_10_per_token_locality() {
    let base = gen_activations(&SyntheticActivationSpec {
        batches: 1,
        tokens_per_batch: 8,
        channels: 12,
        sigma: 1.0,
        channel_scales: vec![(5, 20.0)],
        seed: 1500,
    })
    .unwrap();
    let q_base = per_token_quantize(&base, 4).unwrap();
    let d_base = per_token_dequantize(&q_base).unwrap();

    let mut violations = 0usize;
    for perturbed_token in 0..8usize {
        let mut tokens = base.tokens().clone();
        tokens
            .row_mut(perturbed_token)
            .mapv_inplace(|v| v * 17.5 + 3.0);
        let batch = base.with_tokens(tokens).unwrap();
        let q = per_token_quantize(&batch, 4).unwrap();
        let d = per_token_dequantize(&q).unwrap();
        for other in 0..8usize {
            if other == perturbed_token {
                continue;
            }
            let params_same = q.params[other] == q_base.params[other];
            let codes_same = q.codes.row(other) == q_base.codes.row(other);
            let roundtrip_same = d.row(other) == d_base.row(other);
            if !(params_same && codes_same && roundtrip_same) {
                violations += 1;
            }
        }
    }
    verdict(
        "10 per-token locality",
        violations == 0,
        &format!("{violations} cross-token violations over 8x7 checks"),
    );
}
