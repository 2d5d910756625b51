//! Operation-count probes over the plain-tensor scan kernels.

use std::time::Instant;

use mode_core::numerics::Tensor;
use mode_core::ssm::{
    dense_ode_integrate_step, full_scan, relevance_scores, selective_scan_segmented, HiddenState, Integrator,
    LowRankFactors, OpCounter, ScanOptions, SegmentPlan,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CliResult;
use crate::report::{ComplexityRow, RatioRow, SelectionRow};

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
}

fn random_problem(d: usize, r: usize, len: usize, seed: u64) -> CliResult<(LowRankFactors, Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (d as f64).sqrt();
    let f = LowRankFactors::new(
        uniform(&[d, r], s, &mut rng),
        uniform(&[d, r], s, &mut rng),
        uniform(&[d, 1], s, &mut rng),
        uniform(&[1, d], s, &mut rng),
        None,
        1.0,
    )?;
    let xs = uniform(&[len, 1], 1.0, &mut rng);
    let decay = Tensor::vector((0..d).map(|_| -rng.gen_range(0.1..1.0)).collect());
    Ok((f, xs, decay))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn dense_scan(f: &LowRankFactors, xs: &Tensor, steps: usize, method: Integrator) -> CliResult<OpCounter> {
    let a = f.u.matmul(&f.v.transpose()?)?;
    let mut counter = OpCounter::default();
    let (d, _) = f.dims();
    let mut state = HiddenState::zeros(d);
    for t in 0..xs.shape()[0] {
        let x = Tensor::vector(vec![xs.data()[t]]);
        state = dense_ode_integrate_step(&a, f, &state, &x, steps, method, &mut counter)?;
    }
    Ok(counter)
}

/// Low-rank and dense transition counts for one scan at every `(d, r)`.
pub fn complexity_rows(
    d_list: &[usize],
    r_list: &[usize],
    len: usize,
    steps: usize,
    method: Integrator,
    repeats: usize,
    seed: u64,
) -> CliResult<(Vec<ComplexityRow>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &d in d_list {
        for &r in r_list {
            if r > d {
                skipped.push(format!("skipped d={d}, r={r}: rank exceeds state size"));
                continue;
            }
            let (f, xs, decay) = random_problem(d, r, len, seed)?;
            let opts = ScanOptions {
                a_decay: decay,
                ode_steps: steps,
                integrator: method,
                clamp: None,
            };
            let out = full_scan(std::slice::from_ref(&f), &xs, &opts)?;
            let dense = dense_scan(&f, &xs, steps, method)?;
            let (mut lo_t, mut de_t) = (Vec::new(), Vec::new());
            for _ in 0..repeats {
                let t0 = Instant::now();
                full_scan(std::slice::from_ref(&f), &xs, &opts)?;
                lo_t.push(t0.elapsed().as_secs_f64());
                let t0 = Instant::now();
                dense_scan(&f, &xs, steps, method)?;
                de_t.push(t0.elapsed().as_secs_f64());
            }
            rows.push(ComplexityRow {
                d,
                r,
                lookback: len,
                ode_steps: steps,
                transition_macs: out.counter.transition_macs,
                expected_macs: (2 * len * steps * method.stages() * d * r) as u64,
                dense_transition_macs: dense.dense_transition_macs,
                median_seconds: median(lo_t),
                dense_median_seconds: median(de_t),
            });
        }
    }
    Ok((rows, skipped))
}

/// Ratios between neighbouring list entries with the other size held fixed.
pub fn ratio_rows(rows: &[ComplexityRow], d_list: &[usize], r_list: &[usize]) -> Vec<RatioRow> {
    let find = |d: usize, r: usize| rows.iter().find(|c| c.d == d && c.r == r);
    let mut out = Vec::new();
    let mut push = |vary: &str, fixed: usize, a: &ComplexityRow, b: &ComplexityRow, from: usize, to: usize| {
        out.push(RatioRow {
            vary: vary.into(),
            fixed,
            from,
            to,
            lowrank_ratio: b.transition_macs as f64 / a.transition_macs as f64,
            dense_ratio: b.dense_transition_macs as f64 / a.dense_transition_macs as f64,
        });
    };
    for &d in d_list {
        for w in r_list.windows(2) {
            if let (Some(a), Some(b)) = (find(d, w[0]), find(d, w[1])) {
                push("r", d, a, b, w[0], w[1]);
            }
        }
    }
    for &r in r_list {
        for w in d_list.windows(2) {
            if let (Some(a), Some(b)) = (find(w[0], r), find(w[1], r)) {
                push("d", r, a, b, w[0], w[1]);
            }
        }
    }
    out
}

/// Full-update counts of the segmented scan for each `k`, always including
/// the `k = S` baseline.
#[allow(clippy::too_many_arguments)]
pub fn selection_rows(
    d: usize,
    r: usize,
    segment_length: usize,
    k_list: &[usize],
    len: usize,
    steps: usize,
    method: Integrator,
    seed: u64,
) -> CliResult<Vec<SelectionRow>> {
    let mut ks: Vec<usize> = k_list.to_vec();
    ks.push(segment_length);
    ks.sort_unstable();
    ks.dedup();
    let (f, xs, decay) = random_problem(d, r, len, seed)?;
    let opts = ScanOptions {
        a_decay: decay,
        ode_steps: steps,
        integrator: method,
        clamp: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde17a);
    let deltas: Vec<f64> = (0..len).map(|_| rng.gen_range(0.01..3.0)).collect();
    let scores = relevance_scores(&deltas);
    let macs_per_update = (2 * steps * method.stages() * d * r) as u64;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in &ks {
        let plan = SegmentPlan::new(&scores, segment_length, k)?;
        let out = selective_scan_segmented(std::slice::from_ref(&f), &xs, &plan, &opts)?;
        let expected: usize = (0..len)
            .step_by(segment_length)
            .map(|s0| k.min(segment_length.min(len - s0)))
            .sum();
        rows.push(SelectionRow {
            segment_length,
            k,
            lookback: len,
            full_updates: out.counter.full_updates,
            expected_full_updates: expected as u64,
            transition_macs: out.counter.transition_macs,
            macs_per_update,
            selection_comparisons: out.counter.selection_comparisons,
            decay_macs: out.counter.decay_macs,
            ratio_to_full: 0.0,
        });
    }
    let base = rows.last().map_or(1, |r| r.transition_macs.max(1)) as f64;
    for row in &mut rows {
        row.ratio_to_full = row.transition_macs as f64 / base;
    }
    Ok(rows)
}
