//! Data preparation, training and scoring shared by the commands.

use std::time::Instant;

use mode_core::data::{
    chronological_split, destandardize, irregular_resample, irregular_windows, load_csv, make_windows, synth_generate,
    RawSeries, SplitTag, WindowDataset, STD_EPS,
};
use mode_core::model::{ChannelStats, ModeModel, ModelConfig};
use mode_core::numerics::Tensor;
use mode_core::training::{error_metrics, predict_dataset, train, EpochRecord, TrainConfig, TrainOutcome};

use crate::error::CliResult;
use crate::report::{HorizonMetrics, MetricsReport};
use crate::spec::DataSpec;

/// Standardized train/val/test windows plus the raw train-split scale.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: WindowDataset,
    pub val: WindowDataset,
    pub test: WindowDataset,
    pub stats: ChannelStats,
    pub names: Vec<String>,
}

pub fn load_series(data: &DataSpec) -> CliResult<RawSeries> {
    Ok(match &data.csv {
        Some(p) => load_csv(p)?,
        None => synth_generate(&data.synth)?,
    })
}

pub fn prepare(data: &DataSpec, lookback: usize, horizon: usize) -> CliResult<Prepared> {
    let raw = load_series(data)?;
    prepare_series(&raw, data, lookback, horizon)
}

pub fn prepare_series(raw: &RawSeries, data: &DataSpec, lookback: usize, horizon: usize) -> CliResult<Prepared> {
    let segs = chronological_split(raw, &data.split)?;
    let stats = segs[0].channel_stats();
    let tags = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
    let mut sets = Vec::with_capacity(3);
    for (i, (seg, tag)) in segs.iter().zip(tags).enumerate() {
        let stride = if tag == SplitTag::Train { data.train_stride } else { data.eval_stride };
        let w = match data.keep_prob {
            Some(p) => {
                let kept = irregular_resample(seg, p, data.resample_seed.wrapping_add(i as u64))?;
                irregular_windows(seg, &kept, lookback, horizon, stride, tag)?
            }
            None => make_windows(seg, lookback, horizon, stride, tag)?,
        };
        let w = w.standardize(STD_EPS);
        sets.push(if data.ignore_timestamps { w.with_unit_deltas() } else { w });
    }
    let test = sets.pop().unwrap();
    let val = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok(Prepared {
        train,
        val,
        test,
        stats,
        names: raw.names.clone(),
    })
}

fn head_steps(t: &Tensor, h: usize) -> Tensor {
    let s = t.shape();
    let (m, full, v) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(m * h * v);
    for i in 0..m {
        data.extend_from_slice(&t.data()[i * full * v..(i * full + h) * v]);
    }
    Tensor::new(vec![m, h, v], data).expect("prefix shape")
}

/// Scores the first `h` forecast steps for each requested `h`.
pub fn horizon_metrics(model: &ModeModel, ds: &WindowDataset, horizons: &[usize]) -> CliResult<Vec<HorizonMetrics>> {
    let pred = predict_dataset(model, ds, 256)?;
    let (pred, target) = match &ds.stats {
        Some(st) => (destandardize(&pred, st)?, destandardize(&ds.targets, st)?),
        None => (pred, ds.targets.clone()),
    };
    let scale = model.norm_stats.as_ref().map(|s| s.std.as_slice());
    horizons
        .iter()
        .map(|&h| {
            let (p, t) = (head_steps(&pred, h), head_steps(&target, h));
            let (mse, mae) = error_metrics(&p, &t, scale)?;
            let (raw_mse, raw_mae) = error_metrics(&p, &t, None)?;
            Ok(HorizonMetrics {
                horizon: h,
                mse,
                mae,
                raw_mse,
                raw_mae,
            })
        })
        .collect()
}

/// Peak resident set size from the OS, or 0 where unavailable.
pub fn peak_rss_bytes() -> u64 {
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("VmHWM:"))
                .and_then(|l| l.split_whitespace().nth(1)?.parse::<u64>().ok())
        })
        .map_or(0, |kb| kb * 1024)
}

pub struct TrainedRun {
    pub model: ModeModel,
    pub outcome: TrainOutcome,
    pub seconds: f64,
}

pub fn fit(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    prep: &Prepared,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> CliResult<TrainedRun> {
    let cfg = ModelConfig {
        v: prep.train.n_vars(),
        ..cfg.clone()
    };
    let mut model = ModeModel::build_variant(&cfg)?;
    model.norm_stats = Some(prep.stats.clone());
    let started = Instant::now();
    let outcome = train(&mut model, &prep.train, Some(&prep.val), tc, on_epoch)?;
    Ok(TrainedRun {
        model,
        outcome,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Test-split report for a trained model.
pub fn metrics_report(
    model: &ModeModel,
    ds: &WindowDataset,
    horizons: &[usize],
    run: Option<&TrainedRun>,
) -> CliResult<MetricsReport> {
    let per_horizon = horizon_metrics(model, ds, horizons)?;
    let (x, _, dt) = ds.batch(&[0]);
    let mut g = mode_core::numerics::Graph::new();
    let xv = g.constant(x);
    let counter = model.forward(&mut g, xv, dt.as_ref())?.counter;
    let (seconds_per_epoch, best_epoch) = match run {
        Some(r) => (r.seconds / r.outcome.records.len().max(1) as f64, r.outcome.best_epoch),
        None => (0.0, None),
    };
    Ok(MetricsReport {
        split: format!("{:?}", ds.split).to_lowercase(),
        windows: ds.len(),
        per_horizon,
        seconds_per_epoch,
        peak_rss_bytes: peak_rss_bytes(),
        transition_macs: counter.transition_macs + counter.dense_transition_macs,
        selection_ops: counter.selection_comparisons,
        full_updates: counter.full_updates,
        param_count: model.param_count(),
        best_epoch,
    })
}
