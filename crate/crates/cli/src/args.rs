//! Command-line flags. Every flag overrides the matching field of the
//! config file (or of the defaults when no file is given).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mode_core::data::SplitSpec;
use mode_core::model::BlockKind;
use mode_core::param_gen::{DeltaSource, OdeMode};
use mode_core::ssm::Integrator;

use crate::error::{CliError, CliResult};
use crate::spec::{Command, RunSpec};

#[derive(Debug, Parser)]
#[command(name = "mode", version, about = "Train, evaluate and benchmark the low-rank ODE state-space forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Train on a dataset, score the test split and save a checkpoint.
    Train(RunArgs),
    /// Score a checkpoint on the test split.
    Eval(RunArgs),
    /// Forecast the rows that follow an input CSV.
    Predict(RunArgs),
    /// Count transition work over grids of state size and rank.
    BenchComplexity(RunArgs),
    /// Count full updates of the segmented scan for several k.
    BenchSelection(RunArgs),
    /// Score one model under increasing input noise.
    Robustness(RunArgs),
    /// Train and score one model per lookback length.
    Lookback(RunArgs),
}

impl Sub {
    fn parts(&self) -> (Command, &RunArgs) {
        match self {
            Sub::Train(a) => (Command::Train, a),
            Sub::Eval(a) => (Command::Eval, a),
            Sub::Predict(a) => (Command::Predict, a),
            Sub::BenchComplexity(a) => (Command::BenchComplexity, a),
            Sub::BenchSelection(a) => (Command::BenchSelection, a),
            Sub::Robustness(a) => (Command::Robustness, a),
            Sub::Lookback(a) => (Command::Lookback, a),
        }
    }

    /// Config file (if any) with flags applied on top.
    pub fn to_spec(&self) -> CliResult<RunSpec> {
        let (command, a) = self.parts();
        let mut spec = match &a.config {
            Some(p) => RunSpec::load(p)?,
            None => RunSpec::default(),
        };
        spec.command = command;
        a.apply(&mut spec)?;
        Ok(spec)
    }
}

fn parse_split(s: &str) -> Result<SplitSpec, String> {
    if s == "ett" {
        return Ok(SplitSpec::EttPreset);
    }
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let r: [f64; 3] = parts
        .try_into()
        .map_err(|_| "expected `ett` or three comma-separated fractions".to_string())?;
    Ok(SplitSpec::Ratios(r))
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// TOML file holding a full or partial run spec.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,

    /// CSV with a header row and an optional leading timestamp column.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Rows of the synthetic series (used when no CSV is given).
    #[arg(long)]
    pub synth_n: Option<usize>,
    #[arg(long)]
    pub synth_noise: Option<f64>,
    #[arg(long)]
    pub synth_seed: Option<u64>,
    /// `ett` or `train,val,test` fractions.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<SplitSpec>,
    #[arg(long)]
    pub train_stride: Option<usize>,
    #[arg(long)]
    pub eval_stride: Option<usize>,
    #[arg(long)]
    pub keep_prob: Option<f64>,
    #[arg(long)]
    pub resample_seed: Option<u64>,
    #[arg(long)]
    pub ignore_timestamps: bool,

    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_state: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub ode_steps: Option<usize>,
    #[arg(long)]
    pub integrator: Option<Integrator>,
    #[arg(long)]
    pub segment_length: Option<usize>,
    #[arg(long)]
    pub k_per_segment: Option<usize>,
    #[arg(long)]
    pub block_kind: Option<BlockKind>,
    #[arg(long)]
    pub ode_mode: Option<OdeMode>,
    #[arg(long)]
    pub clamp: Option<f64>,
    #[arg(long)]
    pub delta_source: Option<DeltaSource>,
    #[arg(long)]
    pub layer_norm: bool,

    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Gradient-norm bound; 0 disables clipping.
    #[arg(long)]
    pub clip_norm: Option<f64>,

    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,

    #[arg(long, value_delimiter = ',')]
    pub d_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub r_list: Option<Vec<usize>>,
    #[arg(long)]
    pub bench_lookback: Option<usize>,
    #[arg(long)]
    pub bench_ode_steps: Option<usize>,
    #[arg(long)]
    pub bench_integrator: Option<Integrator>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub bench_segment: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,

    #[arg(long, value_delimiter = ',')]
    pub noise_stds: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub lookbacks: Option<Vec<usize>>,
}

macro_rules! set {
    ($($src:expr => $dst:expr),* $(,)?) => {
        $(if let Some(v) = $src.clone() { $dst = v; })*
    };
}

impl RunArgs {
    pub fn apply(&self, s: &mut RunSpec) -> CliResult<()> {
        set! {
            self.seed => s.seed,
            self.synth_n => s.data.synth.n,
            self.synth_noise => s.data.synth.noise_std,
            self.synth_seed => s.data.synth.seed,
            self.split => s.data.split,
            self.train_stride => s.data.train_stride,
            self.eval_stride => s.data.eval_stride,
            self.resample_seed => s.data.resample_seed,
            self.lookback => s.model.lookback,
            self.horizon => s.model.horizon,
            self.d_model => s.model.d_model,
            self.d_state => s.model.d_state,
            self.rank => s.model.rank,
            self.layers => s.model.n_layers,
            self.ode_steps => s.model.ode_steps,
            self.integrator => s.model.integrator,
            self.segment_length => s.model.segment_length,
            self.k_per_segment => s.model.k_per_segment,
            self.block_kind => s.model.block_kind,
            self.ode_mode => s.model.ode_mode,
            self.delta_source => s.model.delta_source,
            self.epochs => s.train.epochs,
            self.batch_size => s.train.batch_size,
            self.lr => s.train.lr,
            self.lambda_reg => s.train.lambda_reg,
            self.patience => s.train.early_stop_patience,
            self.horizons => s.horizons,
            self.d_list => s.bench.d_list,
            self.r_list => s.bench.r_list,
            self.bench_lookback => s.bench.lookback,
            self.bench_ode_steps => s.bench.ode_steps,
            self.bench_integrator => s.bench.integrator,
            self.repeats => s.bench.repeats,
            self.bench_segment => s.bench.segment_length,
            self.k_list => s.bench.k_list,
            self.noise_stds => s.noise_stds,
            self.lookbacks => s.lookbacks,
        }
        if let Some(p) = &self.out {
            s.output_dir = Some(p.clone());
        }
        if let Some(p) = &self.csv {
            s.data.csv = Some(p.clone());
        }
        if let Some(p) = self.keep_prob {
            s.data.keep_prob = Some(p);
        }
        if let Some(c) = self.clamp {
            s.model.clamp = Some(c);
        }
        if let Some(c) = self.clip_norm {
            if c < 0.0 {
                return Err(CliError::Validation(format!("clip_norm: must be ≥ 0, got {c}")));
            }
            s.train.clip_norm = (c > 0.0).then_some(c);
        }
        if let Some(p) = &self.checkpoint {
            s.checkpoint = Some(p.clone());
        }
        if let Some(p) = &self.input {
            s.input = Some(p.clone());
        }
        s.data.ignore_timestamps |= self.ignore_timestamps;
        s.model.layer_norm |= self.layer_norm;
        Ok(())
    }
}
