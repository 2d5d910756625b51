//! Run specification: everything a command needs, loadable from TOML and
//! echoed into every report.

use std::path::{Path, PathBuf};

use mode_core::data::{SplitSpec, SynthSpec};
use mode_core::model::ModelConfig;
use mode_core::ssm::Integrator;
use mode_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const OUTPUT_ROOT_ENV: &str = "MODE_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    #[default]
    Train,
    Eval,
    Predict,
    BenchComplexity,
    BenchSelection,
    Robustness,
    Lookback,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Predict => "predict",
            Command::BenchComplexity => "bench-complexity",
            Command::BenchSelection => "bench-selection",
            Command::Robustness => "robustness",
            Command::Lookback => "lookback",
        }
    }
}

/// Where the series comes from and how it is cut into windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// CSV file; the synthetic generator is used when absent.
    pub csv: Option<PathBuf>,
    pub synth: SynthSpec,
    pub split: SplitSpec,
    pub train_stride: usize,
    pub eval_stride: usize,
    /// Keep each row with this probability and feed timestamp gaps as Δ.
    pub keep_prob: Option<f64>,
    pub resample_seed: u64,
    /// Replace every Δ with 1.
    pub ignore_timestamps: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            csv: None,
            synth: SynthSpec::default(),
            split: SplitSpec::default(),
            train_stride: 1,
            eval_stride: 1,
            keep_prob: None,
            resample_seed: 0,
            ignore_timestamps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub d_list: Vec<usize>,
    pub r_list: Vec<usize>,
    pub lookback: usize,
    pub ode_steps: usize,
    pub integrator: Integrator,
    pub repeats: usize,
    pub segment_length: usize,
    pub k_list: Vec<usize>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            d_list: vec![32, 64],
            r_list: vec![8, 16],
            lookback: 96,
            ode_steps: 4,
            integrator: Integrator::Euler,
            repeats: 3,
            segment_length: 8,
            k_list: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub command: Command,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Prefix lengths of the forecast scored separately; empty means `[H]`.
    pub horizons: Vec<usize>,
    pub checkpoint: Option<PathBuf>,
    /// CSV whose last `L` rows are forecast by `predict`.
    pub input: Option<PathBuf>,
    pub bench: BenchSpec,
    pub noise_stds: Vec<f64>,
    pub lookbacks: Vec<usize>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            command: Command::Train,
            seed: 0,
            output_dir: None,
            data: DataSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            horizons: Vec::new(),
            checkpoint: None,
            input: None,
            bench: BenchSpec::default(),
            noise_stds: vec![0.0, 0.1, 0.3],
            lookbacks: vec![48, 96],
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn require_file(field: &str, path: Option<&Path>) -> CliResult<()> {
    match path {
        None => Err(invalid(format!("{field}: required for this command"))),
        Some(p) if !p.is_file() => Err(invalid(format!("{field}: no such file `{}`", p.display()))),
        Some(_) => Ok(()),
    }
}

impl RunSpec {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("config: cannot read `{}`: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Copies the top-level seed into the model and optimizer configs.
    pub fn resolved(mut self) -> Self {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    /// Horizons to score, defaulting to the model horizon.
    pub fn eval_horizons(&self) -> Vec<usize> {
        if self.horizons.is_empty() {
            vec![self.model.horizon]
        } else {
            self.horizons.clone()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let core = |e: mode_core::Error| invalid(e.to_string());
        let d = &self.data;
        if let Some(p) = &d.csv {
            require_file("data.csv", Some(p))?;
        } else {
            d.synth.validate().map_err(core)?;
        }
        if d.train_stride == 0 || d.eval_stride == 0 {
            return Err(invalid("data: strides must be at least 1"));
        }
        if let Some(p) = d.keep_prob {
            if !(p > 0.0 && p <= 1.0) {
                return Err(invalid(format!("data.keep_prob: must lie in (0, 1], got {p}")));
            }
        }
        if let SplitSpec::Ratios(r) = &d.split {
            if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("data.split: ratios must lie in [0, 1] and sum to 1, got {r:?}")));
            }
        }
        match self.command {
            Command::Train | Command::Robustness | Command::Lookback => {
                self.model.validate().map_err(core)?;
                self.train.validate().map_err(core)?;
            }
            Command::BenchComplexity | Command::BenchSelection => {}
            Command::Eval | Command::Predict => {}
        }
        if matches!(self.command, Command::Train | Command::Robustness) {
            if let Some(&h) = self.eval_horizons().iter().find(|&&h| h == 0 || h > self.model.horizon) {
                return Err(invalid(format!("horizons: {h} outside 1..={}", self.model.horizon)));
            }
        }
        match self.command {
            Command::Eval => require_file("checkpoint", self.checkpoint.as_deref())?,
            Command::Predict => {
                require_file("checkpoint", self.checkpoint.as_deref())?;
                require_file("input", self.input.as_deref())?;
            }
            Command::Robustness => {
                if let Some(p) = &self.checkpoint {
                    require_file("checkpoint", Some(p))?;
                }
                if self.noise_stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                    return Err(invalid("noise_stds: every std must be finite and ≥ 0"));
                }
            }
            Command::Lookback => {
                if self.lookbacks.is_empty() || self.lookbacks.contains(&0) {
                    return Err(invalid("lookbacks: need at least one positive length"));
                }
            }
            Command::BenchComplexity => {
                let b = &self.bench;
                if b.d_list.is_empty() || b.r_list.is_empty() {
                    return Err(invalid("bench: d_list and r_list must be nonempty"));
                }
                if b.d_list.contains(&0) || b.r_list.contains(&0) || b.lookback == 0 || b.ode_steps == 0 {
                    return Err(invalid("bench: sizes must be positive"));
                }
            }
            Command::BenchSelection => {
                let b = &self.bench;
                if b.segment_length == 0 || b.lookback == 0 || b.ode_steps == 0 || b.k_list.is_empty() {
                    return Err(invalid("bench: segment_length, lookback, ode_steps and k_list must be positive"));
                }
                if let Some(k) = b.k_list.iter().find(|&&k| k > b.segment_length) {
                    return Err(invalid(format!("bench.k_list: k={k} exceeds segment_length {}", b.segment_length)));
                }
                if self.model.rank == 0 || self.model.rank > self.model.d_state {
                    return Err(invalid("model.rank: must lie in 1..=d_state"));
                }
            }
            Command::Train => {}
        }
        Ok(())
    }

    /// Short digest of the spec, stable across runs.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(json);
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `output_dir`, else `$MODE_OUTPUT_ROOT/<command>-<run id>`.
    pub fn output_path(&self) -> PathBuf {
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from);
        root.join(format!("{}-{}", self.command.as_str(), self.run_id()))
    }
}
