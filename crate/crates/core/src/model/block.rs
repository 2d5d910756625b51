use rand::Rng;

use super::config::{BlockKind, ModelConfig};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::param_gen::{DeltaSource, FactorGenerator, FactorVars, GeneratorConfig};
use crate::ssm::{clamp_factor, relevance_scores, Integrator, OpCounter, SegmentPlan};

/// `(weight [in×out], bias [out])`.
pub type Affine = (ParamId, ParamId);

/// Residual branches start near zero so a fresh block is close to identity.
const OUT_PROJ_SCALE: f64 = 0.1;

pub(crate) fn add_affine<R: Rng>(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Affine {
    let bound = 1.0 / (n_in as f64).sqrt();
    let w = store.add_uniform(format!("{name}.weight"), &[n_in, n_out], bound, rng);
    let b = store.add_uniform(format!("{name}.bias"), &[n_out], bound, rng);
    (w, b)
}

/// Applies an affine map to the trailing axis of `x: [B×L×n]`.
pub(crate) fn apply_affine(g: &mut Graph, store: &ParamStore, x: Var, (w, b): Affine) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let n_in = *s.last().unwrap();
    let rows = g.value(x).len() / n_in.max(1);
    let flat = g.reshape(x, &[rows, n_in])?;
    let (wv, bv) = (g.param(store, w), g.param(store, b));
    let y = g.linear(flat, wv, bv)?;
    let mut shape = s;
    *shape.last_mut().unwrap() = g.shape(y)[1];
    g.reshape(y, &shape)
}

/// Diagonal state matrix `a = −exp(a_log)` discretized exactly per step.
#[derive(Clone, Debug)]
pub struct VanillaSsm {
    pub delta: Option<Affine>,
    pub a_log: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub d_skip: ParamId,
}

#[derive(Clone, Debug)]
pub enum ScanCore {
    Ode(FactorGenerator),
    Vanilla(VanillaSsm),
}

#[derive(Clone, Debug)]
pub enum EncoderBlock {
    Scan {
        in_proj: Affine,
        /// `(kernel [W×d_model], bias [d_model])`.
        conv: (ParamId, ParamId),
        gate_proj: Affine,
        out_proj: Affine,
        core: ScanCore,
    },
    Linear(Affine),
}

/// Result of one block on a batch.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    /// Post-scan hidden states `[B×L×d]`, absent for the linear block.
    pub hidden: Option<Var>,
}

impl EncoderBlock {
    pub fn init<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        let dm = cfg.d_model;
        if cfg.block_kind == BlockKind::Linear {
            return Ok(Self::Linear(add_affine(store, &format!("{prefix}.linear"), dm, dm, rng)));
        }
        let in_proj = add_affine(store, &format!("{prefix}.in_proj"), dm, dm, rng);
        let kb = 1.0 / (cfg.conv_width as f64).sqrt();
        let conv = (
            store.add_uniform(format!("{prefix}.conv.kernel"), &[cfg.conv_width, dm], kb, rng),
            store.add_uniform(format!("{prefix}.conv.bias"), &[dm], kb, rng),
        );
        let gate_proj = add_affine(store, &format!("{prefix}.gate_proj"), dm, dm, rng);
        let out_proj = add_affine(store, &format!("{prefix}.out_proj"), dm, dm, rng);
        for id in [out_proj.0, out_proj.1] {
            let p = store.get_mut(id);
            p.value = p.value.map(|x| x * OUT_PROJ_SCALE);
        }
        let core = match cfg.block_kind {
            BlockKind::ModeOde => {
                let gc = GeneratorConfig {
                    mode: cfg.ode_mode,
                    d: cfg.d_state,
                    r: cfg.rank,
                    v_in: dm,
                    v_out: dm,
                    delta_source: cfg.delta_source,
                    delta_min: cfg.delta_min,
                    delta_max: cfg.delta_max,
                };
                ScanCore::Ode(FactorGenerator::init(gc, store, &format!("{prefix}.gen"), rng)?)
            }
            _ => {
                let d = cfg.d_state;
                let delta = match cfg.delta_source {
                    DeltaSource::Learned => {
                        let w = store.add_uniform(format!("{prefix}.ssm.delta.weight"), &[dm, 1], 1.0 / (dm as f64).sqrt(), rng);
                        let b = store.add(format!("{prefix}.ssm.delta.bias"), Tensor::vector(vec![0.0]));
                        Some((w, b))
                    }
                    DeltaSource::Timestamps => None,
                };
                let a_log: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1f64..1.0).ln()).collect();
                let bb = 1.0 / (d as f64).sqrt();
                ScanCore::Vanilla(VanillaSsm {
                    delta,
                    a_log: store.add(format!("{prefix}.ssm.a_log"), Tensor::vector(a_log)),
                    b: store.add_uniform(format!("{prefix}.ssm.B"), &[d, dm], bb, rng),
                    c: store.add_uniform(format!("{prefix}.ssm.C"), &[dm, d], bb, rng),
                    d_skip: store.add(format!("{prefix}.ssm.D"), Tensor::full(&[dm], 1.0)),
                })
            }
        };
        Ok(Self::Scan {
            in_proj,
            conv,
            gate_proj,
            out_proj,
            core,
        })
    }

    /// `tokens: [B×L×d_model]`; `ext_delta: [B×L]` replaces the learned Δ.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        tokens: Var,
        ext_delta: Option<Var>,
        counter: &mut OpCounter,
    ) -> Result<BlockOutput> {
        match self {
            Self::Linear(aff) => Ok(BlockOutput {
                out: apply_affine(g, store, tokens, *aff)?,
                hidden: None,
            }),
            Self::Scan {
                in_proj,
                conv,
                gate_proj,
                out_proj,
                core,
            } => {
                let x = if cfg.layer_norm { g.layer_norm(tokens, 1e-5) } else { tokens };
                let a = apply_affine(g, store, x, *in_proj)?;
                let (k, kb) = (g.param(store, conv.0), g.param(store, conv.1));
                let c = g.causal_conv(a, k, kb)?;
                let u = g.silu(c);
                let (s, hidden) = self.scan(g, store, cfg, core, u, ext_delta, counter)?;
                let gp = apply_affine(g, store, x, *gate_proj)?;
                let gate = g.silu(gp);
                let gated = g.mul(s, gate)?;
                let o = apply_affine(g, store, gated, *out_proj)?;
                Ok(BlockOutput {
                    out: g.add(o, tokens)?,
                    hidden: Some(hidden),
                })
            }
        }
    }

    /// The scan alone on `u: [B×L×d_model]`, returning `(ys, hidden)`.
    #[allow(clippy::too_many_arguments)]
    pub fn scan(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        core: &ScanCore,
        u: Var,
        ext_delta: Option<Var>,
        counter: &mut OpCounter,
    ) -> Result<(Var, Var)> {
        let s = g.shape(u).to_vec();
        if s.len() != 3 || s[2] != cfg.d_model {
            return shape_err("encoder_block", format!("tokens {s:?} for d_model={}", cfg.d_model));
        }
        match core {
            ScanCore::Ode(gen) => {
                let delta = match ext_delta {
                    Some(dv) => dv,
                    None => gen.delta_graph(g, store, u)?,
                };
                ode_scan(g, store, cfg, gen, u, delta, counter)
            }
            ScanCore::Vanilla(ssm) => {
                let delta = match (ext_delta, ssm.delta) {
                    (Some(dv), _) => dv,
                    (None, Some(aff)) => {
                        let pre = apply_affine(g, store, u, aff)?;
                        let sp = g.softplus(pre);
                        let cl = g.clamp(sp, cfg.delta_min, cfg.delta_max);
                        g.reshape(cl, &s[..2])?
                    }
                    (None, None) => {
                        return Err(crate::Error::Config("timestamp Δ required but not supplied".into()));
                    }
                };
                vanilla_scan(g, store, cfg, ssm, u, delta, counter)
            }
        }
    }
}

struct StepFactors {
    u: Var,
    v: Var,
    b: Var,
    c: Var,
    dynamic: bool,
}

impl StepFactors {
    fn apply(&self, g: &mut Graph, h: Var, t: usize) -> Result<Var> {
        if self.dynamic {
            let z = g.batch_matvec(self.v, h, Some(t), true)?;
            g.batch_matvec(self.u, z, Some(t), false)
        } else {
            let z = g.matmul(h, self.v)?;
            g.matmul_t(z, self.u, false, true)
        }
    }

    fn inject(&self, g: &mut Graph, x: Var, t: usize) -> Result<Var> {
        if self.dynamic {
            g.batch_matvec(self.b, x, Some(t), false)
        } else {
            g.matmul_t(x, self.b, false, true)
        }
    }

    fn readout(&self, g: &mut Graph, h: Var, t: usize) -> Result<Var> {
        if self.dynamic {
            g.batch_matvec(self.c, h, Some(t), false)
        } else {
            g.matmul_t(h, self.c, false, true)
        }
    }
}

/// Per-row selection plans from the current Δ values.
fn plans(delta: &Tensor, bsz: usize, len: usize, cfg: &ModelConfig) -> Result<Vec<SegmentPlan>> {
    if !delta.is_finite() {
        return Err(Error::NonFinite { op: "step size".into() });
    }
    (0..bsz)
        .map(|b| {
            let scores = relevance_scores(&delta.data()[b * len..(b + 1) * len]);
            SegmentPlan::new(&scores, cfg.segment_length, cfg.k_per_segment)
        })
        .collect()
}

/// Stop-gradient clamp on `U`, one factor per `d×r` block.
fn clamp_u(g: &mut Graph, u: Var, v: Var, d: usize, r: usize, alpha: f64) -> Result<Var> {
    let (uv, vv) = (g.value(u), g.value(v));
    let blocks = uv.len() / (d * r);
    let mut factors = Vec::with_capacity(blocks);
    for i in 0..blocks {
        let sl = i * d * r..(i + 1) * d * r;
        let ub = Tensor::new(vec![d, r], uv.data()[sl.clone()].to_vec())?;
        let vb = Tensor::new(vec![d, r], vv.data()[sl].to_vec())?;
        factors.push(clamp_factor(&ub, &vb, alpha)?);
    }
    if factors.iter().all(|&f| f == 1.0) {
        return Ok(u);
    }
    g.scale_blocks(u, factors)
}

fn ode_scan(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    gen: &FactorGenerator,
    u: Var,
    delta: Var,
    counter: &mut OpCounter,
) -> Result<(Var, Var)> {
    let s = g.shape(u).to_vec();
    let (bsz, len) = (s[0], s[1]);
    let (d, r) = (cfg.d_state, cfg.rank);
    let gf = gen.generate_graph(g, store, u, delta)?;
    let (fu, fv, fb, fc, dynamic) = match gf.factors {
        FactorVars::Static { u, v, b, c } => (u, v, b, c, false),
        FactorVars::Dynamic { u, v, b, c } => (u, v, b, c, true),
    };
    let fu = match cfg.clamp {
        Some(alpha) => clamp_u(g, fu, fv, d, r, alpha)?,
        None => fu,
    };
    let f = StepFactors {
        u: fu,
        v: fv,
        b: fb,
        c: fc,
        dynamic,
    };
    let plans = plans(g.value(delta), bsz, len, cfg)?;
    counter.selection_comparisons += plans.iter().map(SegmentPlan::comparisons).sum::<u64>();

    let steps = cfg.ode_steps;
    let mut h = g.constant(Tensor::zeros(&[bsz, d]));
    let mut ys = Vec::with_capacity(len);
    let mut hs = Vec::with_capacity(len);
    for t in 0..len {
        let x = g.select_time(u, t)?;
        let dt_full = g.select_time(delta, t)?;
        let mask: Vec<bool> = plans.iter().map(|p| p.is_selected(t)).collect();
        let n_sel = mask.iter().filter(|&&m| m).count();
        let ode_h = if n_sel > 0 {
            let bx = f.inject(g, x, t)?;
            let dt = g.scale(dt_full, 1.0 / steps as f64);
            let half = g.scale(dt, 0.5);
            let mut hc = h;
            for _ in 0..steps {
                let ah = f.apply(g, hc, t)?;
                let k1 = g.add(ah, bx)?;
                match cfg.integrator {
                    Integrator::Euler => {
                        let inc = g.row_scale(k1, dt)?;
                        hc = g.add(hc, inc)?;
                    }
                    Integrator::Heun => {
                        let inc = g.row_scale(k1, dt)?;
                        let hp = g.add(hc, inc)?;
                        let ahp = f.apply(g, hp, t)?;
                        let k2 = g.add(ahp, bx)?;
                        let ks = g.add(k1, k2)?;
                        let inc2 = g.row_scale(ks, half)?;
                        hc = g.add(hc, inc2)?;
                    }
                }
            }
            let per = (steps * cfg.integrator.stages() * 2 * d * r) as u64;
            counter.transition_macs += per * n_sel as u64;
            counter.input_macs += (n_sel * d * cfg.d_model) as u64;
            counter.full_updates += n_sel as u64;
            Some(hc)
        } else {
            None
        };
        let dec_h = if n_sel < bsz {
            let o = g.outer(dt_full, gf.a_decay);
            let e = g.exp(o);
            counter.decay_updates += (bsz - n_sel) as u64;
            counter.decay_macs += ((bsz - n_sel) * d) as u64;
            Some(g.mul(h, e)?)
        } else {
            None
        };
        h = match (ode_h, dec_h) {
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (Some(a), Some(b)) => g.blend(a, b, mask)?,
            (None, None) => unreachable!("batch has at least one row"),
        };
        let ch = f.readout(g, h, t)?;
        let skip = g.mul_cols(x, gf.d_skip)?;
        counter.output_macs += (bsz * cfg.d_model * (d + 1)) as u64;
        ys.push(g.add(ch, skip)?);
        hs.push(h);
    }
    Ok((g.stack_time(&ys)?, g.stack_time(&hs)?))
}

fn vanilla_scan(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    ssm: &VanillaSsm,
    u: Var,
    delta: Var,
    counter: &mut OpCounter,
) -> Result<(Var, Var)> {
    let s = g.shape(u).to_vec();
    let (bsz, len) = (s[0], s[1]);
    let d = cfg.d_state;
    let a_log = g.param(store, ssm.a_log);
    let ea = g.exp(a_log);
    let a = g.scale(ea, -1.0);
    let neg_log = g.scale(a_log, -1.0);
    let inv = g.exp(neg_log);
    let (b, c, dk) = (g.param(store, ssm.b), g.param(store, ssm.c), g.param(store, ssm.d_skip));
    let mut h = g.constant(Tensor::zeros(&[bsz, d]));
    let mut ys = Vec::with_capacity(len);
    let mut hs = Vec::with_capacity(len);
    for t in 0..len {
        let x = g.select_time(u, t)?;
        let dt = g.select_time(delta, t)?;
        let o = g.outer(dt, a);
        let abar = g.exp(o);
        // (ā − 1)/a = (1 − ā)·exp(−a_log)
        let one_minus = g.affine(abar, -1.0, 1.0);
        let coef = g.mul_cols(one_minus, inv)?;
        let bx = g.matmul_t(x, b, false, true)?;
        let inj = g.mul(coef, bx)?;
        let decayed = g.mul(abar, h)?;
        h = g.add(decayed, inj)?;
        let ch = g.matmul_t(h, c, false, true)?;
        let skip = g.mul_cols(x, dk)?;
        ys.push(g.add(ch, skip)?);
        hs.push(h);
        counter.dense_transition_macs += (bsz * d) as u64;
        counter.input_macs += (bsz * d * cfg.d_model) as u64;
        counter.output_macs += (bsz * cfg.d_model * (d + 1)) as u64;
        counter.full_updates += bsz as u64;
    }
    Ok((g.stack_time(&ys)?, g.stack_time(&hs)?))
}
