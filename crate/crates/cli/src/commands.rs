//! One function per subcommand. Each validates its spec, does all work in
//! memory and only then writes into its output directory.

use std::path::{Path, PathBuf};

use mode_core::data::{inject_gaussian_noise, load_csv, NormStats, STD_EPS};
use mode_core::numerics::Tensor;
use mode_core::param_gen::{deltas_from_timestamps, median_interval, DeltaSource};
use mode_core::training::Checkpoint;

use crate::bench::{complexity_rows, ratio_rows, selection_rows};
use crate::error::{CliError, CliResult};
use crate::pipeline::{fit, horizon_metrics, metrics_report, prepare, prepare_series, load_series};
use crate::report::{CheckStatus, LookbackRow, Record, Report, RobustnessRow};
use crate::spec::{Command, RunSpec};

pub const REPORT_FILE: &str = "report.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const FORECAST_FILE: &str = "forecast.csv";

/// What a command produced and where it was written.
#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    pub dir: PathBuf,
}

fn finish(spec: &RunSpec, report: Report, extra: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<Outcome> {
    let dir = spec.output_path();
    let text = report.to_jsonl()?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create `{}`: {e}", dir.display())))?;
    extra(&dir)?;
    std::fs::write(dir.join(REPORT_FILE), text)?;
    Ok(Outcome { report, dir })
}

pub fn run(spec: RunSpec) -> CliResult<Outcome> {
    let spec = spec.resolved();
    spec.validate()?;
    match spec.command {
        Command::Train => cmd_train(&spec),
        Command::Eval => cmd_eval(&spec),
        Command::Predict => cmd_predict(&spec),
        Command::BenchComplexity => cmd_bench_complexity(&spec),
        Command::BenchSelection => cmd_bench_selection(&spec),
        Command::Robustness => cmd_robustness(&spec),
        Command::Lookback => cmd_lookback(&spec),
    }
}

fn train_and_score(spec: &RunSpec, report: &mut Report) -> CliResult<(Checkpoint, crate::pipeline::Prepared)> {
    let m = &spec.model;
    let prep = prepare(&spec.data, m.lookback, m.horizon)?;
    let mut epochs = Vec::new();
    let run = fit(m, &spec.train, &prep, &mut |r| epochs.push(r.clone()))?;
    report.records.extend(epochs.into_iter().map(Record::Epoch));
    if run.outcome.stopped_early {
        report.push(Record::Note {
            message: format!("stopped early; kept epoch {:?}", run.outcome.best_epoch),
        });
    }
    let metrics = metrics_report(&run.model, &prep.test, &spec.eval_horizons(), Some(&run))?;
    report.push(Record::Metrics(metrics));
    let ck = Checkpoint::from_model(&run.model, Some(&run.outcome.optim), run.outcome.best_metric);
    Ok((ck, prep))
}

pub fn cmd_train(spec: &RunSpec) -> CliResult<Outcome> {
    let mut report = Report::new(spec);
    let (ck, _) = train_and_score(spec, &mut report)?;
    let bytes = ck.to_bytes()?;
    finish(spec, report, |dir| Ok(std::fs::write(dir.join(CHECKPOINT_FILE), bytes)?))
}

fn load_checkpoint(spec: &RunSpec) -> CliResult<Checkpoint> {
    let path = spec.checkpoint.as_ref().expect("validated");
    Ok(Checkpoint::load(path)?)
}

pub fn cmd_eval(spec: &RunSpec) -> CliResult<Outcome> {
    let ck = load_checkpoint(spec)?;
    let model = ck.to_model()?;
    let cfg = model.config();
    let prep = prepare(&spec.data, cfg.lookback, cfg.horizon)?;
    let horizons = if spec.horizons.is_empty() { vec![cfg.horizon] } else { spec.horizons.clone() };
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > cfg.horizon) {
        return Err(CliError::Validation(format!("horizons: {h} outside 1..={}", cfg.horizon)));
    }
    let mut report = Report::new(spec);
    report.push(Record::Metrics(metrics_report(&model, &prep.test, &horizons, None)?));
    finish(spec, report, |_| Ok(()))
}

pub fn cmd_predict(spec: &RunSpec) -> CliResult<Outcome> {
    let model = load_checkpoint(spec)?.to_model()?;
    let cfg = model.config().clone();
    let series = load_csv(spec.input.as_ref().expect("validated"))?;
    let (n, v) = (series.len(), series.n_vars());
    if v != cfg.v {
        return Err(CliError::Validation(format!("input: {v} channels, model expects {}", cfg.v)));
    }
    if n < cfg.lookback {
        return Err(CliError::Validation(format!("input: {n} rows, need lookback {}", cfg.lookback)));
    }
    let mut x = series.values.data()[(n - cfg.lookback) * v..].to_vec();
    let st = NormStats::from_rows(&x, v, STD_EPS);
    st.apply(&mut x);
    let deltas = match (cfg.delta_source, &series.timestamps) {
        (DeltaSource::Timestamps, Some(ts)) => {
            let med = median_interval(ts).unwrap_or(1.0);
            let o = n - cfg.lookback;
            let prev = o.checked_sub(1).map(|p| ts[p]);
            Some(Tensor::new(
                vec![1, cfg.lookback],
                deltas_from_timestamps(&ts[o..], prev, med, cfg.delta_min, cfg.delta_max)?,
            )?)
        }
        (DeltaSource::Timestamps, None) => Some(Tensor::full(&[1, cfg.lookback], 1.0)),
        (DeltaSource::Learned, _) => None,
    };
    let pred = model.predict(&Tensor::new(vec![1, cfg.lookback, v], x)?, deltas.as_ref())?;
    let mut raw = pred.data().to_vec();
    st.invert(&mut raw);
    let mut report = Report::new(spec);
    let mut csv = format!("step,{}\n", series.names.join(","));
    for (step, row) in raw.chunks(v).enumerate() {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        csv.push_str(&format!("{},{}\n", step + 1, cells.join(",")));
        report.push(Record::Forecast {
            step: step + 1,
            values: row.to_vec(),
        });
    }
    finish(spec, report, |dir| Ok(std::fs::write(dir.join(FORECAST_FILE), csv)?))
}

pub fn cmd_bench_complexity(spec: &RunSpec) -> CliResult<Outcome> {
    let b = &spec.bench;
    let (rows, skipped) = complexity_rows(&b.d_list, &b.r_list, b.lookback, b.ode_steps, b.integrator, b.repeats, spec.seed)?;
    let mut report = Report::new(spec);
    for r in ratio_rows(&rows, &b.d_list, &b.r_list) {
        report.push(Record::Ratio(r));
    }
    let exact = rows.iter().all(|r| r.transition_macs == r.expected_macs);
    report.records.splice(1..1, rows.into_iter().map(Record::Complexity));
    report.push(Record::Check {
        name: "count_formula".into(),
        status: if exact { CheckStatus::Pass } else { CheckStatus::Warn },
        detail: "transition MACs equal 2·L·T·stages·d·r".into(),
    });
    for message in skipped {
        report.push(Record::Note { message });
    }
    finish(spec, report, |_| Ok(()))
}

pub fn cmd_bench_selection(spec: &RunSpec) -> CliResult<Outcome> {
    let b = &spec.bench;
    let m = &spec.model;
    let rows = selection_rows(
        m.d_state,
        m.rank,
        b.segment_length,
        &b.k_list,
        b.lookback,
        b.ode_steps,
        b.integrator,
        spec.seed,
    )?;
    let exact = rows
        .iter()
        .all(|r| r.full_updates == r.expected_full_updates && r.transition_macs == r.full_updates * r.macs_per_update);
    let mut report = Report::new(spec);
    report.records.extend(rows.into_iter().map(Record::Selection));
    report.push(Record::Check {
        name: "full_update_count".into(),
        status: if exact { CheckStatus::Pass } else { CheckStatus::Warn },
        detail: "full updates equal Σ min(k, segment) and MACs equal updates × per-step cost".into(),
    });
    finish(spec, report, |_| Ok(()))
}

pub fn cmd_robustness(spec: &RunSpec) -> CliResult<Outcome> {
    let mut report = Report::new(spec);
    let (ck, prep) = match &spec.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let cfg = &ck.model;
            let prep = prepare(&spec.data, cfg.lookback, cfg.horizon)?;
            (ck, prep)
        }
        None => train_and_score(spec, &mut report)?,
    };
    let model = ck.to_model()?;
    let horizon = [model.config().horizon];
    let score = |std: f64| -> CliResult<(f64, f64)> {
        let noisy = inject_gaussian_noise(&prep.test, std, spec.seed)?;
        let m = horizon_metrics(&model, &noisy, &horizon)?.remove(0);
        Ok((m.mse, m.mae))
    };
    let (base_mse, base_mae) = score(0.0)?;
    let mut stds = spec.noise_stds.clone();
    stds.sort_by(f64::total_cmp);
    stds.dedup();
    let mut rows = Vec::with_capacity(stds.len());
    for &s in &stds {
        let (mse, mae) = if s == 0.0 { (base_mse, base_mae) } else { score(s)? };
        rows.push(RobustnessRow {
            noise_std: s,
            mse,
            mae,
            mse_growth: mse / base_mse - 1.0,
            mae_growth: mae / base_mae - 1.0,
        });
    }
    let monotone = rows.windows(2).all(|w| w[1].mse >= w[0].mse);
    report.records.extend(rows.into_iter().map(Record::Robustness));
    report.push(Record::Check {
        name: "monotone_degradation".into(),
        status: if monotone { CheckStatus::Pass } else { CheckStatus::Warn },
        detail: "test MSE does not decrease as noise grows".into(),
    });
    let bytes = if spec.checkpoint.is_none() { Some(ck.to_bytes()?) } else { None };
    finish(spec, report, |dir| match bytes {
        Some(b) => Ok(std::fs::write(dir.join(CHECKPOINT_FILE), b)?),
        None => Ok(()),
    })
}

pub fn cmd_lookback(spec: &RunSpec) -> CliResult<Outcome> {
    let raw = load_series(&spec.data)?;
    let mut ls = spec.lookbacks.clone();
    ls.sort_unstable();
    ls.dedup();
    let mut report = Report::new(spec);
    for l in ls {
        let mut cfg = spec.model.clone();
        cfg.lookback = l;
        let prep = match prepare_series(&raw, &spec.data, l, cfg.horizon) {
            Ok(p) => p,
            Err(CliError::Validation(msg)) => {
                report.push(Record::Note {
                    message: format!("skipped L={l}: {msg}"),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let run = fit(&cfg, &spec.train, &prep, &mut |_| {})?;
        let m = horizon_metrics(&run.model, &prep.test, &[cfg.horizon])?.remove(0);
        report.push(Record::Lookback(LookbackRow {
            lookback: l,
            mse: m.mse,
            mae: m.mae,
            best_epoch: run.outcome.best_epoch,
            train_windows: prep.train.len(),
        }));
    }
    finish(spec, report, |_| Ok(()))
}
