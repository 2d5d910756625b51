use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch_loss;
use crate::error::{Error, Result};
use crate::model::{ModeModel, ModelConfig};
use crate::numerics::{finite_diff_grad, ParamStore, Tensor};

const FD_EPS: f64 = 1e-5;
const MAX_PARAMS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares analytic and central-difference gradients of the total loss on
/// one batch. `tamper` may edit the analytic gradients before comparison.
///
/// Relative error per entry is `|a − n| / max(|a|, |n|, 1e−6)`.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    model: &mut ModeModel,
    x: &Tensor,
    y: &Tensor,
    deltas: Option<&Tensor>,
    lambda: f64,
    tolerance: f64,
    tamper: &dyn Fn(&mut ParamStore),
) -> Result<GradCheckReport> {
    let (g, loss, _) = batch_loss(model, x.clone(), y.clone(), deltas, lambda)?;
    model.store.zero_grads();
    g.backward(loss, &mut model.store)?;
    drop(g);
    tamper(&mut model.store);
    let analytic: Vec<Tensor> = model.store.iter().map(|p| p.grad.clone()).collect();
    let ids: Vec<_> = model.store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for (id, an) in ids.into_iter().zip(analytic) {
        let mut store = std::mem::take(&mut model.store);
        let mut failure = None;
        let numeric = finite_diff_grad(&mut store, id, FD_EPS, |s| {
            let probe = model.with_store(s);
            match batch_loss(&probe, x.clone(), y.clone(), deltas, lambda).and_then(|(g, l, _)| g.scalar(l)) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        model.store = store;
        if let Some(e) = failure {
            return Err(e);
        }
        let max_rel_err = an
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max);
        params.push(ParamCheck {
            name: model.store.get(id).name.clone(),
            numel: an.len(),
            max_rel_err,
        });
    }
    let pass = params.iter().all(|p| p.max_rel_err <= tolerance);
    Ok(GradCheckReport {
        tolerance,
        params,
        pass,
    })
}

/// Builds `cfg`, draws a seeded two-window batch and checks every parameter.
pub fn gradient_check_suite(cfg: &ModelConfig, lambda: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut model = ModeModel::build_variant(cfg)?;
    if model.param_count() > MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradient check is limited to {MAX_PARAMS} parameters, model has {}",
            model.param_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut draw = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let x = draw(&[2, cfg.lookback, cfg.v]);
    let y = draw(&[2, cfg.horizon, cfg.v]);
    let deltas = Tensor::new(
        vec![2, cfg.lookback],
        (0..2 * cfg.lookback).map(|i| 0.5 + (i % 3) as f64 * 0.5).collect(),
    )?;
    check_gradients(&mut model, &x, &y, Some(&deltas), lambda, tolerance, &|_| {})
}
