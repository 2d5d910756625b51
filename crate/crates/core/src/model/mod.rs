//! The forecasting network: linear tokenizer, residual encoder blocks and a
//! temporal-then-feature forecast head.

mod block;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::param_gen::DeltaSource;
use crate::ssm::OpCounter;

pub use block::{Affine, BlockOutput, EncoderBlock, ScanCore, VanillaSsm};
pub use config::{BlockKind, ModelConfig};

use block::{add_affine, apply_affine};

/// Per-channel location and scale of a training split, used to report
/// metrics on a normalized scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ModeModel {
    cfg: ModelConfig,
    pub store: ParamStore,
    tokenizer: Affine,
    blocks: Vec<EncoderBlock>,
    /// `(weight [H×L], bias [H])`.
    head_time: (ParamId, ParamId),
    head_feat: Affine,
    pub norm_stats: Option<ChannelStats>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B×H×V]`.
    pub pred: Var,
    /// Hidden trajectory `[B×L×d]` of the last scanning block.
    pub hidden: Option<Var>,
    pub counter: OpCounter,
}

impl ModeModel {
    /// Builds the network for `cfg.block_kind`, seeded by `cfg.seed`.
    ///
    /// Parameters are registered tokenizer first, then blocks, then head,
    /// so variants with the same seed share tokenizer weights.
    pub fn build_variant(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let tokenizer = add_affine(&mut store, "tokenizer", cfg.v, cfg.d_model, &mut rng);
        let blocks = (0..cfg.n_layers)
            .map(|i| EncoderBlock::init(cfg, &mut store, &format!("blocks.{i}"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let tb = 1.0 / (cfg.lookback as f64).sqrt();
        let head_time = (
            store.add_uniform("head.time.weight", &[cfg.horizon, cfg.lookback], tb, &mut rng),
            store.add_uniform("head.time.bias", &[cfg.horizon], tb, &mut rng),
        );
        let head_feat = add_affine(&mut store, "head.feature", cfg.d_model, cfg.v, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            tokenizer,
            blocks,
            head_time,
            head_feat,
            norm_stats: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    pub fn tokenizer_ids(&self) -> Affine {
        self.tokenizer
    }

    pub fn head_ids(&self) -> ((ParamId, ParamId), Affine) {
        (self.head_time, self.head_feat)
    }

    /// Same architecture with parameter values taken from `store`.
    pub fn with_store(&self, store: &ParamStore) -> ModeModel {
        ModeModel {
            cfg: self.cfg.clone(),
            store: store.clone(),
            tokenizer: self.tokenizer,
            blocks: self.blocks.clone(),
            head_time: self.head_time,
            head_feat: self.head_feat,
            norm_stats: self.norm_stats.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// `[B×L×V] → [B×L×d_model]`.
    pub fn tokenize_embed(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.cfg.v {
            return shape_err("tokenize_embed", format!("input {s:?} for v={}", self.cfg.v));
        }
        apply_affine(g, &self.store, x, self.tokenizer)
    }

    /// `[B×L×d_model] → [B×H×V]`.
    pub fn forecast_head(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.store, self.head_time.0), g.param(&self.store, self.head_time.1));
        let t = g.time_linear(tokens, w, b)?;
        apply_affine(g, &self.store, t, self.head_feat)
    }

    /// Full forward pass on `x: [B×L×V]`. `deltas: [B×L]` supplies Δ when
    /// the model takes step sizes from timestamps.
    pub fn forward(&self, g: &mut Graph, x: Var, deltas: Option<&Tensor>) -> Result<Forward> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.cfg.lookback || s[2] != self.cfg.v {
            return shape_err(
                "model_forward",
                format!("input {s:?}, expected [B×{}×{}]", self.cfg.lookback, self.cfg.v),
            );
        }
        let ext = match (self.cfg.delta_source, deltas) {
            (DeltaSource::Timestamps, Some(dt)) => {
                if dt.shape() != [s[0], s[1]] {
                    return shape_err("model_forward", format!("deltas {:?} for input {s:?}", dt.shape()));
                }
                let (lo, hi) = (self.cfg.delta_min, self.cfg.delta_max);
                Some(g.constant(dt.map(|v| v.clamp(lo, hi))))
            }
            (DeltaSource::Timestamps, None) => {
                let uses_delta = self.cfg.block_kind != BlockKind::Linear && self.cfg.n_layers > 0;
                if uses_delta {
                    return Err(Error::Config("model takes Δ from timestamps but none were given".into()));
                }
                None
            }
            (DeltaSource::Learned, _) => None,
        };
        let mut counter = OpCounter::default();
        let mut tokens = self.tokenize_embed(g, x)?;
        let mut hidden = None;
        for blk in &self.blocks {
            let o = blk.forward(g, &self.store, &self.cfg, tokens, ext, &mut counter)?;
            tokens = o.out;
            if o.hidden.is_some() {
                hidden = o.hidden;
            }
        }
        let pred = self.forecast_head(g, tokens)?;
        Ok(Forward { pred, hidden, counter })
    }

    /// Inference without keeping the graph: returns `[B×H×V]`.
    pub fn predict(&self, x: &Tensor, deltas: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, xv, deltas)?;
        g.check()?;
        Ok(g.value(f.pred).clone())
    }

    /// Named parameter values in registration order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites parameters by name; every parameter must be supplied.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, model has {}",
                named.len(),
                self.store.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            self.store
                .set_value(id, value.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
