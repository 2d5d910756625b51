//! Series ingestion, chronological splits, windowing, per-window
//! normalization, synthetic generators, irregular resampling and input
//! noise.

mod csv_io;
mod synth;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ChannelStats;
use crate::numerics::Tensor;
use crate::param_gen::{deltas_from_timestamps, median_interval};

pub use csv_io::{load_csv, parse_timestamp, read_csv};
pub use synth::{synth_generate, SynthSpec};

/// Default floor on per-window standard deviations.
pub const STD_EPS: f64 = 1e-5;

/// A multivariate series with optional strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    /// Seconds, one per row.
    pub timestamps: Option<Vec<f64>>,
    /// `[N×V]`.
    pub values: Tensor,
    pub names: Vec<String>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn slice(&self, rows: Range<usize>) -> RawSeries {
        let v = self.n_vars();
        let data = self.values.data()[rows.start * v..rows.end * v].to_vec();
        RawSeries {
            timestamps: self.timestamps.as_ref().map(|t| t[rows.clone()].to_vec()),
            values: Tensor::new(vec![rows.len(), v], data).expect("row slice"),
            names: self.names.clone(),
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        let v = self.n_vars();
        &self.values.data()[i * v..(i + 1) * v]
    }

    /// Timestamps, falling back to row indices.
    pub fn times(&self) -> Vec<f64> {
        match &self.timestamps {
            Some(t) => t.clone(),
            None => (0..self.len()).map(|i| i as f64).collect(),
        }
    }

    /// Per-channel mean and population std (floored at [`STD_EPS`]).
    pub fn channel_stats(&self) -> ChannelStats {
        let (n, v) = (self.len().max(1) as f64, self.n_vars());
        let mut mean = vec![0.0; v];
        for i in 0..self.len() {
            for (m, x) in mean.iter_mut().zip(self.row(i)) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; v];
        for i in 0..self.len() {
            for ((s, x), m) in var.iter_mut().zip(self.row(i)).zip(&mean) {
                *s += (x - m) * (x - m) / n;
            }
        }
        ChannelStats {
            mean,
            std: var.into_iter().map(|s| s.sqrt().max(STD_EPS)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Train/val/test fractions summing to 1.
    Ratios([f64; 3]),
    /// 12/4/4 months counted in rows at the series' own granularity.
    EttPreset,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratios([0.7, 0.1, 0.2])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Train,
    Val,
    Test,
}

/// Rows per 30-day month at the series' median sampling interval.
pub fn rows_per_month(s: &RawSeries) -> Result<usize> {
    let ts = s.timestamps.as_ref().ok_or_else(|| Error::Data("calendar split needs timestamps".into()))?;
    let m = median_interval(ts).ok_or_else(|| Error::Data("calendar split needs at least two rows".into()))?;
    Ok((30.0 * 86_400.0 / m).round() as usize)
}

/// Contiguous, ordered train/val/test segments.
pub fn chronological_split(s: &RawSeries, spec: &SplitSpec) -> Result<[RawSeries; 3]> {
    let n = s.len();
    let (a, b, c) = match spec {
        SplitSpec::Ratios(r) => {
            if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("split ratios must be in [0, 1] and sum to 1, got {r:?}")));
            }
            let a = (n as f64 * r[0]).round() as usize;
            let b = ((n as f64 * r[1]).round() as usize).min(n - a);
            (a, b, n - a - b)
        }
        SplitSpec::EttPreset => {
            let month = rows_per_month(s)?;
            let (a, b) = (12 * month, 4 * month);
            if a + 2 * b > n {
                return Err(Error::Data(format!("preset split needs {} rows, series has {n}", a + 2 * b)));
            }
            (a, b, b)
        }
    };
    Ok([s.slice(0..a), s.slice(a..a + b), s.slice(a + b..a + b + c)])
}

/// Location and scale of one window's lookback rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

impl NormStats {
    /// Stats of `rows: [L×V]` with the std floored at `eps`.
    pub fn from_rows(rows: &[f64], v: usize, eps: f64) -> Self {
        let l = (rows.len() / v).max(1) as f64;
        let mut mean = vec![0.0; v];
        for row in rows.chunks(v) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= l);
        let mut var = vec![0.0; v];
        for row in rows.chunks(v) {
            for ((s, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|s| (s / l).sqrt().max(eps)).collect();
        Self { mean, std, eps }
    }

    pub fn apply(&self, rows: &mut [f64]) {
        let v = self.mean.len();
        for row in rows.chunks_mut(v) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
    }

    pub fn invert(&self, rows: &mut [f64]) {
        let v = self.mean.len();
        for row in rows.chunks_mut(v) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
    }
}

/// Sliding windows of a series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowDataset {
    /// `[M×L×V]`.
    pub inputs: Tensor,
    /// `[M×H×V]`.
    pub targets: Tensor,
    /// Set once the windows are standardized.
    pub stats: Option<Vec<NormStats>>,
    /// Step sizes `[M×L]` when timestamps are known.
    pub deltas: Option<Tensor>,
    pub split: SplitTag,
    /// Source row of each window's first input step.
    pub origins: Vec<usize>,
    /// Source row of each window's first target step.
    pub target_starts: Vec<usize>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookback(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn n_vars(&self) -> usize {
        self.inputs.shape()[2]
    }

    /// `(inputs, targets, deltas)` for the listed windows.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor, Option<Tensor>) {
        let take = |t: &Tensor| {
            let s = t.shape();
            let m: usize = s[1..].iter().product();
            let mut data = Vec::with_capacity(idx.len() * m);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * m..(i + 1) * m]);
            }
            let mut shape = s.to_vec();
            shape[0] = idx.len();
            Tensor::new(shape, data).expect("batch shape")
        };
        (take(&self.inputs), take(&self.targets), self.deltas.as_ref().map(take))
    }

    /// Standardizes inputs and targets with each window's lookback stats.
    pub fn standardize(&self, eps: f64) -> WindowDataset {
        let (l, h, v) = (self.lookback(), self.horizon(), self.n_vars());
        let mut out = self.clone();
        let mut stats = Vec::with_capacity(self.len());
        for m in 0..self.len() {
            let xin = &mut out.inputs.data_mut()[m * l * v..(m + 1) * l * v];
            let st = NormStats::from_rows(xin, v, eps);
            st.apply(xin);
            st.apply(&mut out.targets.data_mut()[m * h * v..(m + 1) * h * v]);
            stats.push(st);
        }
        out.stats = Some(stats);
        out
    }

    /// Same windows with `Δ = 1` everywhere.
    pub fn with_unit_deltas(&self) -> WindowDataset {
        let mut out = self.clone();
        out.deltas = Some(Tensor::full(&[self.len(), self.lookback()], 1.0));
        out
    }
}

/// Maps standardized predictions `[M×H×V]` back to the raw scale.
pub fn destandardize(pred: &Tensor, stats: &[NormStats]) -> Result<Tensor> {
    let s = pred.shape();
    if s.len() != 3 || s[0] != stats.len() {
        return Err(Error::Shape {
            op: "destandardize",
            detail: format!("{s:?} with {} stats", stats.len()),
        });
    }
    let m = s[1] * s[2];
    let mut out = pred.clone();
    for (i, st) in stats.iter().enumerate() {
        st.invert(&mut out.data_mut()[i * m..(i + 1) * m]);
    }
    Ok(out)
}

fn window_deltas(times: &[f64], starts: &[usize], l: usize) -> Result<Option<Tensor>> {
    let Some(med) = median_interval(times) else { return Ok(None) };
    let mut data = Vec::with_capacity(starts.len() * l);
    for &o in starts {
        let prev = o.checked_sub(1).map(|p| times[p]);
        data.extend(deltas_from_timestamps(&times[o..o + l], prev, med, f64::MIN_POSITIVE, f64::MAX)?);
    }
    Ok(Some(Tensor::new(vec![starts.len(), l], data)?))
}

/// Window `m` covers input rows `[m·stride, m·stride+L)` and target rows
/// `[m·stride+L, m·stride+L+H)`.
pub fn make_windows(s: &RawSeries, l: usize, h: usize, stride: usize, split: SplitTag) -> Result<WindowDataset> {
    if l == 0 || h == 0 || stride == 0 {
        return Err(Error::Config("lookback, horizon and stride must be positive".into()));
    }
    let n = s.len();
    if n < l + h {
        return Err(Error::Data(format!("{split:?} segment has {n} rows, need at least L+H = {}", l + h)));
    }
    let count = (n - l - h) / stride + 1;
    let v = s.n_vars();
    let mut inputs = Vec::with_capacity(count * l * v);
    let mut targets = Vec::with_capacity(count * h * v);
    let origins: Vec<usize> = (0..count).map(|m| m * stride).collect();
    for &o in &origins {
        inputs.extend_from_slice(&s.values.data()[o * v..(o + l) * v]);
        targets.extend_from_slice(&s.values.data()[(o + l) * v..(o + l + h) * v]);
    }
    let deltas = match &s.timestamps {
        Some(ts) => window_deltas(ts, &origins, l)?,
        None => None,
    };
    Ok(WindowDataset {
        inputs: Tensor::new(vec![count, l, v], inputs)?,
        targets: Tensor::new(vec![count, h, v], targets)?,
        stats: None,
        deltas,
        split,
        target_starts: origins.iter().map(|o| o + l).collect(),
        origins,
    })
}

/// Keeps each row independently with probability `keep_prob`.
pub fn irregular_resample(s: &RawSeries, keep_prob: f64, seed: u64) -> Result<RawSeries> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!("keep_prob must lie in (0, 1], got {keep_prob}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: Vec<usize> = (0..s.len()).filter(|_| keep_prob >= 1.0 || rng.gen_bool(keep_prob)).collect();
    let v = s.n_vars();
    let mut values = Vec::with_capacity(keep.len() * v);
    for &i in &keep {
        values.extend_from_slice(s.row(i));
    }
    let times = s.times();
    Ok(RawSeries {
        timestamps: Some(keep.iter().map(|&i| times[i]).collect()),
        values: Tensor::new(vec![keep.len(), v], values)?,
        names: s.names.clone(),
    })
}

/// Windows over an irregular subsample `kept` of the regular series `full`.
///
/// Inputs are `L` consecutive kept observations with Δ from their
/// timestamps. Targets are the `H` rows of `full` that follow the last
/// input observation.
pub fn irregular_windows(
    full: &RawSeries,
    kept: &RawSeries,
    l: usize,
    h: usize,
    stride: usize,
    split: SplitTag,
) -> Result<WindowDataset> {
    if l == 0 || h == 0 || stride == 0 {
        return Err(Error::Config("lookback, horizon and stride must be positive".into()));
    }
    let (ft, kt) = (full.times(), kept.times());
    let pos: Vec<usize> = kt
        .iter()
        .map(|t| {
            ft.binary_search_by(|x| x.total_cmp(t))
                .map_err(|_| Error::Data(format!("kept timestamp {t} not in the full series")))
        })
        .collect::<Result<_>>()?;
    let v = full.n_vars();
    let ends: Vec<usize> = (l.saturating_sub(1)..kt.len())
        .step_by(stride)
        .filter(|&e| pos[e] + h < full.len())
        .collect();
    if ends.is_empty() {
        return Err(Error::Data(format!(
            "{split:?}: {} kept rows leave no window with L={l}, H={h}",
            kt.len()
        )));
    }
    let mut inputs = Vec::with_capacity(ends.len() * l * v);
    let mut targets = Vec::with_capacity(ends.len() * h * v);
    let starts: Vec<usize> = ends.iter().map(|e| e + 1 - l).collect();
    for (&e, &s0) in ends.iter().zip(&starts) {
        inputs.extend_from_slice(&kept.values.data()[s0 * v..(e + 1) * v]);
        let p = pos[e] + 1;
        targets.extend_from_slice(&full.values.data()[p * v..(p + h) * v]);
    }
    let deltas = window_deltas(&kt, &starts, l)?;
    Ok(WindowDataset {
        inputs: Tensor::new(vec![ends.len(), l, v], inputs)?,
        targets: Tensor::new(vec![ends.len(), h, v], targets)?,
        stats: None,
        deltas,
        split,
        origins: starts.iter().map(|&s0| pos[s0]).collect(),
        target_starts: ends.iter().map(|&e| pos[e] + 1).collect(),
    })
}

/// Adds `N(0, std²)` noise to the inputs only.
pub fn inject_gaussian_noise(w: &WindowDataset, std: f64, seed: u64) -> Result<WindowDataset> {
    if !(std >= 0.0) {
        return Err(Error::Config(format!("noise std must be ≥ 0, got {std}")));
    }
    let mut out = w.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    for x in out.inputs.data_mut() {
        *x += dist.sample(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
