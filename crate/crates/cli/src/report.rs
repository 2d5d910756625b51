//! Line-delimited JSON reports and their plain-text rendering.
//!
//! Each line is one record carrying `schema_version`, `run_id` and a `kind`
//! tag. The first line is always the header that echoes the run spec.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use mode_core::training::EpochRecord;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::spec::RunSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub raw_mse: f64,
    pub raw_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub windows: usize,
    pub per_horizon: Vec<HorizonMetrics>,
    pub seconds_per_epoch: f64,
    pub peak_rss_bytes: u64,
    /// Per window, one forward pass.
    pub transition_macs: u64,
    pub selection_ops: u64,
    pub full_updates: u64,
    pub param_count: usize,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub d: usize,
    pub r: usize,
    pub lookback: usize,
    pub ode_steps: usize,
    pub transition_macs: u64,
    /// `2·L·T·s·d·r` with `s` vector-field evaluations per sub-step.
    pub expected_macs: u64,
    pub dense_transition_macs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_median_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    /// `"d"` or `"r"`.
    pub vary: String,
    pub fixed: usize,
    pub from: usize,
    pub to: usize,
    pub lowrank_ratio: f64,
    pub dense_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub segment_length: usize,
    pub k: usize,
    pub lookback: usize,
    pub full_updates: u64,
    pub expected_full_updates: u64,
    pub transition_macs: u64,
    pub macs_per_update: u64,
    pub selection_comparisons: u64,
    pub decay_macs: u64,
    /// Transition work relative to `k = S`.
    pub ratio_to_full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub noise_std: f64,
    pub mse: f64,
    pub mae: f64,
    pub mse_growth: f64,
    pub mae_growth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookbackRow {
    pub lookback: usize,
    pub mse: f64,
    pub mae: f64,
    pub best_epoch: Option<usize>,
    pub train_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Warn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header { command: String, spec: Box<RunSpec> },
    Epoch(EpochRecord),
    Metrics(MetricsReport),
    Complexity(ComplexityRow),
    Ratio(RatioRow),
    Selection(SelectionRow),
    Robustness(RobustnessRow),
    Lookback(LookbackRow),
    Forecast { step: usize, values: Vec<f64> },
    Check { name: String, status: CheckStatus, detail: String },
    Note { message: String },
}

#[derive(Serialize, Deserialize)]
struct Line {
    schema_version: u32,
    run_id: String,
    #[serde(flatten)]
    record: Record,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub run_id: String,
    pub records: Vec<Record>,
}

fn finite(v: f64, what: &str) -> CliResult<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("non-finite {what} in report: {v}")))
    }
}

impl Record {
    fn check_finite(&self) -> CliResult<()> {
        match self {
            Record::Epoch(e) => [e.train_loss, e.val_mse, e.val_mae, e.seconds]
                .iter()
                .try_for_each(|&v| finite(v, "epoch metric")),
            Record::Metrics(m) => {
                finite(m.seconds_per_epoch, "seconds_per_epoch")?;
                m.per_horizon
                    .iter()
                    .flat_map(|h| [h.mse, h.mae, h.raw_mse, h.raw_mae])
                    .try_for_each(|v| finite(v, "metric"))
            }
            Record::Complexity(c) => c
                .median_seconds
                .iter()
                .chain(&c.dense_median_seconds)
                .try_for_each(|&v| finite(v, "timing")),
            Record::Ratio(r) => finite(r.lowrank_ratio, "ratio").and(finite(r.dense_ratio, "ratio")),
            Record::Selection(s) => finite(s.ratio_to_full, "ratio"),
            Record::Robustness(r) => [r.noise_std, r.mse, r.mae, r.mse_growth, r.mae_growth]
                .iter()
                .try_for_each(|&v| finite(v, "robustness metric")),
            Record::Lookback(l) => finite(l.mse, "mse").and(finite(l.mae, "mae")),
            Record::Forecast { values, .. } => values.iter().try_for_each(|&v| finite(v, "forecast")),
            _ => Ok(()),
        }
    }

    /// Zeroes wall-clock and memory fields so reruns compare equal.
    fn strip_timing(&mut self) {
        match self {
            Record::Epoch(e) => e.seconds = 0.0,
            Record::Metrics(m) => {
                m.seconds_per_epoch = 0.0;
                m.peak_rss_bytes = 0;
            }
            Record::Complexity(c) => {
                c.median_seconds = c.median_seconds.map(|_| 0.0);
                c.dense_median_seconds = c.dense_median_seconds.map(|_| 0.0);
            }
            _ => {}
        }
    }
}

impl Report {
    pub fn new(spec: &RunSpec) -> Self {
        Self {
            run_id: spec.run_id(),
            records: vec![Record::Header {
                command: spec.command.as_str().to_string(),
                spec: Box::new(spec.clone()),
            }],
        }
    }

    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn without_timing(&self) -> Report {
        let mut out = self.clone();
        out.records.iter_mut().for_each(Record::strip_timing);
        out
    }

    pub fn metrics(&self) -> Option<&MetricsReport> {
        self.records.iter().find_map(|r| match r {
            Record::Metrics(m) => Some(m),
            _ => None,
        })
    }

    pub fn rows<'a, T>(&'a self, pick: impl Fn(&'a Record) -> Option<&'a T>) -> Vec<&'a T> {
        self.records.iter().filter_map(pick).collect()
    }

    pub fn to_jsonl(&self) -> CliResult<String> {
        let mut out = String::new();
        for r in &self.records {
            r.check_finite()?;
            let line = Line {
                schema_version: SCHEMA_VERSION,
                run_id: self.run_id.clone(),
                record: r.clone(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> CliResult<Report> {
        let mut run_id = None;
        let mut records = Vec::new();
        for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line: Line = serde_json::from_str(l)
                .map_err(|e| CliError::Validation(format!("report line {}: {e}", i + 1)))?;
            if line.schema_version != SCHEMA_VERSION {
                return Err(CliError::Validation(format!(
                    "report line {}: schema version {}",
                    i + 1,
                    line.schema_version
                )));
            }
            run_id.get_or_insert(line.run_id);
            records.push(line.record);
        }
        Ok(Report {
            run_id: run_id.ok_or_else(|| CliError::Validation("empty report".into()))?,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = self.to_jsonl()?;
        let mut f = std::fs::File::create(path)
            .map_err(|e| CliError::Runtime(format!("cannot write `{}`: {e}", path.display())))?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }

    /// Human-readable tables, one per record kind present.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run {}", self.run_id);
        let epochs = self.rows(|r| if let Record::Epoch(e) = r { Some(e) } else { None });
        if !epochs.is_empty() {
            let mut t = Table::new(&["epoch", "train_loss", "val_mse", "val_mae", "seconds"]);
            for e in epochs {
                t.row(vec![
                    e.epoch.to_string(),
                    sci(e.train_loss),
                    sci(e.val_mse),
                    sci(e.val_mae),
                    format!("{:.2}", e.seconds),
                ]);
            }
            out.push_str(&t.render());
        }
        if let Some(m) = self.metrics() {
            let _ = writeln!(
                out,
                "{} split: {} windows, {} params, {} transition MACs and {} selection ops per window",
                m.split, m.windows, m.param_count, m.transition_macs, m.selection_ops
            );
            let mut t = Table::new(&["horizon", "mse", "mae", "raw_mse", "raw_mae"]);
            for h in &m.per_horizon {
                t.row(vec![h.horizon.to_string(), sci(h.mse), sci(h.mae), sci(h.raw_mse), sci(h.raw_mae)]);
            }
            out.push_str(&t.render());
        }
        let cx = self.rows(|r| if let Record::Complexity(c) = r { Some(c) } else { None });
        if !cx.is_empty() {
            let timed = cx.iter().any(|c| c.median_seconds.is_some());
            let mut head = vec!["d", "r", "L", "T", "lowrank_macs", "expected", "dense_macs"];
            if timed {
                head.extend(["lowrank_s", "dense_s"]);
            }
            let mut t = Table::new(&head);
            for c in cx {
                let mut row = vec![
                    c.d.to_string(),
                    c.r.to_string(),
                    c.lookback.to_string(),
                    c.ode_steps.to_string(),
                    c.transition_macs.to_string(),
                    c.expected_macs.to_string(),
                    c.dense_transition_macs.to_string(),
                ];
                if timed {
                    row.push(c.median_seconds.map_or("-".into(), sci));
                    row.push(c.dense_median_seconds.map_or("-".into(), sci));
                }
                t.row(row);
            }
            out.push_str(&t.render());
        }
        let ratios = self.rows(|r| if let Record::Ratio(c) = r { Some(c) } else { None });
        if !ratios.is_empty() {
            let mut t = Table::new(&["vary", "fixed", "from", "to", "lowrank_ratio", "dense_ratio"]);
            for r in ratios {
                t.row(vec![
                    r.vary.clone(),
                    r.fixed.to_string(),
                    r.from.to_string(),
                    r.to.to_string(),
                    format!("{:.4}", r.lowrank_ratio),
                    format!("{:.4}", r.dense_ratio),
                ]);
            }
            out.push_str(&t.render());
        }
        let sel = self.rows(|r| if let Record::Selection(c) = r { Some(c) } else { None });
        if !sel.is_empty() {
            let mut t = Table::new(&["S", "k", "L", "full_updates", "expected", "macs", "comparisons", "ratio"]);
            for s in sel {
                t.row(vec![
                    s.segment_length.to_string(),
                    s.k.to_string(),
                    s.lookback.to_string(),
                    s.full_updates.to_string(),
                    s.expected_full_updates.to_string(),
                    s.transition_macs.to_string(),
                    s.selection_comparisons.to_string(),
                    format!("{:.4}", s.ratio_to_full),
                ]);
            }
            out.push_str(&t.render());
        }
        let rob = self.rows(|r| if let Record::Robustness(c) = r { Some(c) } else { None });
        if !rob.is_empty() {
            let mut t = Table::new(&["noise_std", "mse", "mae", "mse_growth", "mae_growth"]);
            for r in rob {
                t.row(vec![
                    format!("{}", r.noise_std),
                    sci(r.mse),
                    sci(r.mae),
                    pct(r.mse_growth),
                    pct(r.mae_growth),
                ]);
            }
            out.push_str(&t.render());
        }
        let lb = self.rows(|r| if let Record::Lookback(c) = r { Some(c) } else { None });
        if !lb.is_empty() {
            let mut t = Table::new(&["lookback", "mse", "mae", "best_epoch", "train_windows"]);
            for r in lb {
                t.row(vec![
                    r.lookback.to_string(),
                    sci(r.mse),
                    sci(r.mae),
                    r.best_epoch.map_or("-".into(), |e| e.to_string()),
                    r.train_windows.to_string(),
                ]);
            }
            out.push_str(&t.render());
        }
        let fc: Vec<(usize, &Vec<f64>)> = self
            .records
            .iter()
            .filter_map(|r| if let Record::Forecast { step, values } = r { Some((*step, values)) } else { None })
            .collect();
        if !fc.is_empty() {
            let n = fc[0].1.len();
            let head: Vec<String> = std::iter::once("step".to_string()).chain((0..n).map(|i| format!("ch{i}"))).collect();
            let mut t = Table::new(&head.iter().map(String::as_str).collect::<Vec<_>>());
            for (s, vals) in fc {
                t.row(std::iter::once(s.to_string()).chain(vals.iter().map(|v| format!("{v:.6}"))).collect());
            }
            out.push_str(&t.render());
        }
        for r in &self.records {
            match r {
                Record::Check { name, status, detail } => {
                    let _ = writeln!(out, "check {name}: {status:?} ({detail})");
                }
                Record::Note { message } => {
                    let _ = writeln!(out, "note: {message}");
                }
                _ => {}
            }
        }
        out
    }
}

fn sci(v: f64) -> String {
    format!("{v:.4e}")
}

fn pct(v: f64) -> String {
    format!("{:+.2}%", v * 100.0)
}

struct Table {
    head: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(head: &[&str]) -> Self {
        Self {
            head: head.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn row(&mut self, r: Vec<String>) {
        self.rows.push(r);
    }

    fn render(&self) -> String {
        let mut w: Vec<usize> = self.head.iter().map(String::len).collect();
        for r in &self.rows {
            for (i, c) in r.iter().enumerate() {
                w[i] = w[i].max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = cells
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{c:>width$}", width = w[i]))
                .collect::<Vec<_>>()
                .join("  ");
            s.push('\n');
            s
        };
        let mut out = line(&self.head);
        out.push_str(&line(&w.iter().map(|&n| "-".repeat(n)).collect::<Vec<_>>()));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }
}
