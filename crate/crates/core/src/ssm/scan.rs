use std::cell::Cell;
use std::cmp::Ordering;

use super::clamp::stability_clamp;
use super::{apply_skip, ode_integrate_step, HiddenState, Integrator, LowRankFactors, OpCounter};
use crate::error::{shape_err, Error, Result};
use crate::numerics::conv::causal_conv1d_batched;
use crate::numerics::Tensor;

/// Per-step relevance in `[0, 1)`: `1 − e^{−Δ}`, increasing in the step size.
pub fn relevance_scores(deltas: &[f64]) -> Vec<f64> {
    deltas.iter().map(|&d| -(-d).exp_m1()).collect()
}

/// Which steps of each segment receive the full ODE update.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPlan {
    segment_length: usize,
    k_per_segment: usize,
    scores: Vec<f64>,
    mask: Vec<bool>,
    comparisons: u64,
}

impl SegmentPlan {
    /// Picks the `k` highest-scoring steps of every length-`segment_length`
    /// segment (the last segment may be shorter). Ties go to the earlier step.
    pub fn new(scores: &[f64], segment_length: usize, k_per_segment: usize) -> Result<Self> {
        if segment_length == 0 {
            return Err(Error::Config("segment length must be at least 1".into()));
        }
        if k_per_segment > segment_length {
            return Err(Error::Config(format!(
                "k_per_segment {k_per_segment} exceeds segment length {segment_length}"
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Config(format!("relevance score {bad} outside [0, 1]")));
        }
        let mut mask = vec![false; scores.len()];
        let count = Cell::new(0u64);
        for (seg, chunk) in scores.chunks(segment_length).enumerate() {
            let base = seg * segment_length;
            let k = k_per_segment.min(chunk.len());
            if k == 0 {
                continue;
            }
            if k == chunk.len() {
                mask[base..base + k].fill(true);
                continue;
            }
            let mut idx: Vec<usize> = (0..chunk.len()).collect();
            let cmp = |a: &usize, b: &usize| -> Ordering {
                count.set(count.get() + 1);
                chunk[*b].total_cmp(&chunk[*a]).then(a.cmp(b))
            };
            idx.select_nth_unstable_by(k - 1, cmp);
            for &i in &idx[..k] {
                mask[base + i] = true;
            }
        }
        Ok(Self {
            segment_length,
            k_per_segment,
            scores: scores.to_vec(),
            mask,
            comparisons: count.get(),
        })
    }

    /// Every step selected.
    pub fn full(len: usize, segment_length: usize) -> Self {
        let s = segment_length.max(1);
        Self {
            segment_length: s,
            k_per_segment: s,
            scores: vec![1.0; len],
            mask: vec![true; len],
            comparisons: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn segment_length(&self) -> usize {
        self.segment_length
    }

    pub fn k_per_segment(&self) -> usize {
        self.k_per_segment
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_selected(&self, t: usize) -> bool {
        self.mask[t]
    }

    /// Selected step indices, ascending, grouped by segment.
    pub fn selected(&self) -> Vec<Vec<usize>> {
        self.mask
            .chunks(self.segment_length)
            .enumerate()
            .map(|(s, c)| {
                c.iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(i, _)| s * self.segment_length + i)
                    .collect()
            })
            .collect()
    }

    pub fn selected_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn comparisons(&self) -> u64 {
        self.comparisons
    }
}

/// Settings shared by the low-rank scans.
#[derive(Clone, Debug)]
pub struct ScanOptions {
    /// Negative diagonal of the passive decay applied to unselected steps.
    pub a_decay: Tensor,
    pub ode_steps: usize,
    pub integrator: Integrator,
    /// Spectral bound enforced on every step's `UVᵀ`, if any.
    pub clamp: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ScanOutput {
    /// `[L×v_out]`.
    pub ys: Tensor,
    /// Hidden state after each step, `[L×d]`.
    pub hidden: Tensor,
    pub counter: OpCounter,
}

fn row(t: &Tensor, i: usize) -> Tensor {
    let n = t.last_dim();
    Tensor::vector(t.data()[i * n..(i + 1) * n].to_vec())
}

/// Segmented selective scan over `xs: [L×v_in]` starting from `h = 0`.
///
/// `factors` holds either one entry shared by every step or one per step.
/// Selected steps integrate the low-rank ODE; the others decay as
/// `h ← e^{Δ·a_decay} ⊙ h` with no input. Every step emits `C·h + D·x`.
pub fn selective_scan_segmented(
    factors: &[LowRankFactors],
    xs: &Tensor,
    plan: &SegmentPlan,
    opts: &ScanOptions,
) -> Result<ScanOutput> {
    let [len, v_in] = xs.dims2("selective_scan_segmented")?;
    if plan.len() != len {
        return shape_err("selective_scan_segmented", format!("plan covers {} steps, input has {len}", plan.len()));
    }
    if factors.is_empty() || (factors.len() != 1 && factors.len() != len) {
        return shape_err("selective_scan_segmented", format!("{} factor sets for {len} steps", factors.len()));
    }
    let (d, _) = factors[0].dims();
    if factors[0].v_in() != v_in || opts.a_decay.len() != d {
        return shape_err(
            "selective_scan_segmented",
            format!("v_in {v_in} vs {}, decay {:?} for d={d}", factors[0].v_in(), opts.a_decay.shape()),
        );
    }
    let v_out = factors[0].v_out();
    let mut counter = OpCounter {
        selection_comparisons: plan.comparisons(),
        ..OpCounter::default()
    };
    let mut state = HiddenState::zeros(d);
    let mut ys = Vec::with_capacity(len * v_out);
    let mut hidden = Vec::with_capacity(len * d);
    for t in 0..len {
        let f = &factors[if factors.len() == 1 { 0 } else { t }];
        let clamped;
        let f = match opts.clamp {
            Some(alpha) => {
                clamped = stability_clamp(f, alpha)?;
                &clamped
            }
            None => f,
        };
        let x = row(xs, t);
        if plan.is_selected(t) {
            state = ode_integrate_step(f, &state, &x, opts.ode_steps, opts.integrator, &mut counter)?;
            counter.full_updates += 1;
        } else {
            for (h, &a) in state.h.data_mut().iter_mut().zip(opts.a_decay.data()) {
                *h *= (f.delta * a).exp();
            }
            state.step_index += 1;
            counter.decay_updates += 1;
            counter.decay_macs += d as u64;
        }
        let y = f.readout(&state.h, &x, &mut counter)?;
        ys.extend_from_slice(y.data());
        hidden.extend_from_slice(state.h.data());
    }
    Ok(ScanOutput {
        ys: Tensor::new(vec![len, v_out], ys)?,
        hidden: Tensor::new(vec![len, d], hidden)?,
        counter,
    })
}

/// Low-rank ODE update at every step.
pub fn full_scan(factors: &[LowRankFactors], xs: &Tensor, opts: &ScanOptions) -> Result<ScanOutput> {
    let len = xs.shape().first().copied().unwrap_or(0);
    selective_scan_segmented(factors, xs, &SegmentPlan::full(len, len.max(1)), opts)
}

/// Sequential recurrence `h_t = ā ⊙ h_{t−1} + b̄·x_t`, `y_t = C·h_t + D·x_t`
/// from `h_0 = 0`, for a diagonal discretized system.
///
/// `a_bar` is `[d]` or per-step `[L×d]`; `b_bar` is `[d×v_in]` or `[L×d×v_in]`.
pub fn recurrent_scan_dense(
    a_bar: &Tensor,
    b_bar: &Tensor,
    c: &Tensor,
    d_skip: Option<&Tensor>,
    xs: &Tensor,
) -> Result<Tensor> {
    let [len, v_in] = xs.dims2("recurrent_scan_dense")?;
    let [v_out, d] = c.dims2("recurrent_scan_dense")?;
    let a_step = match a_bar.shape() {
        [n] if *n == d => false,
        [l, n] if *l == len && *n == d => true,
        s => return shape_err("recurrent_scan_dense", format!("a_bar {s:?}")),
    };
    let b_step = match b_bar.shape() {
        [n, v] if *n == d && *v == v_in => false,
        [l, n, v] if *l == len && *n == d && *v == v_in => true,
        s => return shape_err("recurrent_scan_dense", format!("b_bar {s:?}")),
    };
    let mut h = vec![0.0; d];
    let mut ys = Vec::with_capacity(len * v_out);
    for t in 0..len {
        let x = &xs.data()[t * v_in..(t + 1) * v_in];
        let a = &a_bar.data()[if a_step { t * d } else { 0 }..][..d];
        let b = &b_bar.data()[if b_step { t * d * v_in } else { 0 }..][..d * v_in];
        for i in 0..d {
            let bx: f64 = b[i * v_in..(i + 1) * v_in].iter().zip(x).map(|(p, q)| p * q).sum();
            h[i] = a[i] * h[i] + bx;
        }
        let mut y = c.matvec(&Tensor::vector(h.clone()))?;
        if let Some(ds) = d_skip {
            y = y.add(&apply_skip(ds, &Tensor::vector(x.to_vec()))?)?;
        }
        ys.extend_from_slice(y.data());
    }
    Tensor::new(vec![len, v_out], ys)
}

/// Depthwise causal convolution of one sequence `[L×C]` with kernel `[W×C]`.
pub fn causal_conv1d(xs: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [len, c] = xs.dims2("causal_conv1d")?;
    let out = causal_conv1d_batched(&xs.clone().reshape(&[1, len, c])?, kernel, bias)?;
    out.reshape(&[len, c])
}
