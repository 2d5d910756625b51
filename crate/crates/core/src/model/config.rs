use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_gen::{DeltaSource, OdeMode};
use crate::ssm::Integrator;

/// What each encoder block computes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Selective low-rank ODE scan.
    #[default]
    ModeOde,
    /// Diagonal ZOH recurrence.
    VanillaMamba,
    /// One affine map per block.
    Linear,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::ModeOde => "mode_ode",
            BlockKind::VanillaMamba => "vanilla_mamba",
            BlockKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mode_ode" => Ok(Self::ModeOde),
            "vanilla_mamba" => Ok(Self::VanillaMamba),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!(
                "unknown block kind `{other}` (expected mode_ode, vanilla_mamba or linear)"
            ))),
        }
    }
}

impl std::str::FromStr for OdeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(Error::Config(format!("unknown ode mode `{other}`"))),
        }
    }
}

impl std::str::FromStr for DeltaSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "timestamps" => Ok(Self::Timestamps),
            other => Err(Error::Config(format!("unknown delta source `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of variates.
    pub v: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub rank: usize,
    pub n_layers: usize,
    pub ode_steps: usize,
    pub integrator: Integrator,
    pub segment_length: usize,
    pub k_per_segment: usize,
    pub block_kind: BlockKind,
    pub ode_mode: OdeMode,
    pub conv_width: usize,
    /// Spectral bound on `U·Vᵀ`; `None` disables the clamp.
    pub clamp: Option<f64>,
    pub delta_source: DeltaSource,
    pub delta_min: f64,
    pub delta_max: f64,
    /// Pre-normalize block inputs.
    pub layer_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            v: 1,
            lookback: 96,
            horizon: 96,
            d_model: 16,
            d_state: 16,
            rank: 8,
            n_layers: 2,
            ode_steps: 4,
            integrator: Integrator::Heun,
            segment_length: 8,
            k_per_segment: 8,
            block_kind: BlockKind::ModeOde,
            ode_mode: OdeMode::Static,
            conv_width: 4,
            clamp: None,
            delta_source: DeltaSource::Learned,
            delta_min: 1e-3,
            delta_max: 10.0,
            layer_norm: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.v == 0 {
            return fail("v", "must be at least 1".into());
        }
        if self.horizon == 0 {
            return fail("horizon", "must be at least 1".into());
        }
        if self.d_model == 0 || self.d_state == 0 {
            return fail("d_model/d_state", "must be at least 1".into());
        }
        if self.rank == 0 || self.rank > self.d_state {
            return fail("rank", format!("must lie in 1..={}, got {}", self.d_state, self.rank));
        }
        if self.conv_width == 0 || self.lookback < self.conv_width {
            return fail(
                "lookback",
                format!("must be at least conv_width ({}), got {}", self.conv_width, self.lookback),
            );
        }
        if self.ode_steps == 0 {
            return fail("ode_steps", "must be at least 1".into());
        }
        if self.segment_length == 0 {
            return fail("segment_length", "must be at least 1".into());
        }
        if self.k_per_segment > self.segment_length {
            return fail(
                "k_per_segment",
                format!("must not exceed segment_length ({}), got {}", self.segment_length, self.k_per_segment),
            );
        }
        if let Some(a) = self.clamp {
            if !(a > 0.0 && a < 1.0) {
                return fail("clamp", format!("must lie in (0, 1), got {a}"));
            }
        }
        if !(self.delta_min > 0.0 && self.delta_min <= self.delta_max) {
            return fail(
                "delta_min/delta_max",
                format!("need 0 < min ≤ max, got [{}, {}]", self.delta_min, self.delta_max),
            );
        }
        Ok(())
    }
}
