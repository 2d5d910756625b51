//! State-transition kernels: low-rank ODE integration, ZOH discretization,
//! recurrent and segmented selective scans, causal convolution and the
//! spectral-norm stability clamp.
//!
//! These operate on plain tensors for a single sequence and keep exact
//! operation counts. The trainable model mirrors them on the gradient tape.

mod clamp;
mod counter;
mod lowrank;
mod ode;
mod scan;
mod zoh;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

pub use clamp::stability_clamp;
pub(crate) use clamp::clamp_factor;
pub use counter::OpCounter;
pub use lowrank::{dense_apply_raw, lowrank_apply, lowrank_apply_raw};
pub use ode::{contractive_step, dense_ode_integrate_step, integrate_raw, ode_integrate_step};
pub use scan::{
    causal_conv1d, full_scan, recurrent_scan_dense, relevance_scores, selective_scan_segmented, ScanOptions,
    ScanOutput, SegmentPlan,
};
pub use zoh::zoh_discretize;

/// Explicit fixed-step integration scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    #[default]
    Heun,
}

impl Integrator {
    /// Vector-field evaluations per sub-step.
    pub fn stages(self) -> usize {
        match self {
            Integrator::Euler => 1,
            Integrator::Heun => 2,
        }
    }
}

impl std::str::FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "heun" => Ok(Self::Heun),
            other => Err(Error::Config(format!("unknown integrator `{other}`"))),
        }
    }
}

/// Factors of one state transition: `A = U·Vᵀ`, input map `B`, readout `C`,
/// optional skip `D` and step size `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactors {
    pub u: Tensor,
    pub v: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    /// Either a length-`v_out` vector applied elementwise or a `v_out×v_in` matrix.
    pub d_skip: Option<Tensor>,
    pub delta: f64,
}

impl LowRankFactors {
    pub fn new(u: Tensor, v: Tensor, b: Tensor, c: Tensor, d_skip: Option<Tensor>, delta: f64) -> Result<Self> {
        let [d, r] = u.dims2("LowRankFactors")?;
        if v.shape() != [d, r] {
            return shape_err("LowRankFactors", format!("U {:?} vs V {:?}", u.shape(), v.shape()));
        }
        if r > d {
            return shape_err("LowRankFactors", format!("rank {r} exceeds state size {d}"));
        }
        let [bd, v_in] = b.dims2("LowRankFactors")?;
        let [v_out, cd] = c.dims2("LowRankFactors")?;
        if bd != d || cd != d {
            return shape_err("LowRankFactors", format!("B {:?}, C {:?} for d={d}", b.shape(), c.shape()));
        }
        if let Some(ds) = &d_skip {
            let ok = match ds.shape() {
                [n] => *n == v_out && v_out == v_in,
                [o, i] => *o == v_out && *i == v_in,
                _ => false,
            };
            if !ok {
                return shape_err("LowRankFactors", format!("D {:?} for {v_out}×{v_in}", ds.shape()));
            }
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {delta}")));
        }
        Ok(Self { u, v, b, c, d_skip, delta })
    }

    /// `(d, r)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.u.shape()[0], self.u.shape()[1])
    }

    pub fn v_in(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn v_out(&self) -> usize {
        self.c.shape()[0]
    }

    /// `B·x`.
    pub fn inject(&self, x: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
        let out = self.b.matvec(x)?;
        counter.input_macs += self.b.len() as u64;
        Ok(out)
    }

    /// `C·h + D·x`.
    pub fn readout(&self, h: &Tensor, x: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
        let mut y = self.c.matvec(h)?;
        counter.output_macs += self.c.len() as u64;
        if let Some(ds) = &self.d_skip {
            let skip = apply_skip(ds, x)?;
            counter.output_macs += ds.len() as u64;
            y = y.add(&skip)?;
        }
        Ok(y)
    }
}

pub(crate) fn apply_skip(d_skip: &Tensor, x: &Tensor) -> Result<Tensor> {
    if d_skip.rank() == 1 {
        d_skip.mul(x)
    } else {
        d_skip.matvec(x)
    }
}

/// Hidden state after `step_index` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Tensor,
    pub step_index: usize,
}

impl HiddenState {
    pub fn zeros(d: usize) -> Self {
        Self {
            h: Tensor::zeros(&[d]),
            step_index: 0,
        }
    }
}
