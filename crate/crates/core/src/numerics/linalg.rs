//! Norm estimates and the finite-difference gradient oracle.

use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Result};

fn start_vector(n: usize) -> Vec<f64> {
    // fixed, non-symmetric start so no coordinate direction is missed
    (0..n).map(|i| 1.0 + 0.37 * ((i * 7 + 3) % 11) as f64).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Power-iteration estimate of the largest singular value of a square matrix.
///
/// Iterates on `MᵀM` and reports `‖M x‖` for the unit iterate `x`, which
/// never decreases from one iteration to the next.
pub fn spectral_norm_estimate(m: &Tensor, iters: usize) -> Result<f64> {
    let [r, c] = m.dims2("spectral_norm_estimate")?;
    if r != c {
        return shape_err("spectral_norm_estimate", format!("not square: {:?}", m.shape()));
    }
    let mt = m.transpose()?;
    let mut x = start_vector(c);
    normalize(&mut x);
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let y = m.matvec(&Tensor::vector(x.clone()))?;
        sigma = y.norm2();
        if sigma == 0.0 {
            return Ok(0.0);
        }
        let mut z = mt.matvec(&y)?.into_data();
        normalize(&mut z);
        x = z;
    }
    let y = m.matvec(&Tensor::vector(x))?;
    Ok(sigma.max(y.norm2()))
}

/// Largest singular value of `U·Vᵀ` without forming the `d×d` product.
///
/// The nonzero squared singular values of `UVᵀ` are the eigenvalues of the
/// `r×r` matrix `(UᵀU)(VᵀV)`, which is iterated to convergence.
pub fn lowrank_spectral_norm(u: &Tensor, v: &Tensor, max_iters: usize) -> Result<f64> {
    let [d, r] = u.dims2("lowrank_spectral_norm")?;
    if v.shape() != [d, r] {
        return shape_err("lowrank_spectral_norm", format!("U {:?} V {:?}", u.shape(), v.shape()));
    }
    let gu = u.transpose()?.matmul(u)?;
    let gv = v.transpose()?.matmul(v)?;
    // Gram factors are PSD, so G_v^{1/2} G_u G_v^{1/2} is a symmetric form of the same spectrum;
    // iterate x ← G_u G_v x and track the Rayleigh-type ratio xᵀG_v G_u G_v x / xᵀG_v x
    let mut x = start_vector(r);
    normalize(&mut x);
    let mut lam = 0.0f64;
    for _ in 0..max_iters.max(1) {
        let gvx = gv.matvec(&Tensor::vector(x.clone()))?;
        let denom: f64 = x.iter().zip(gvx.data()).map(|(a, b)| a * b).sum();
        if denom <= 0.0 {
            break;
        }
        let mut y = gu.matvec(&gvx)?.into_data();
        let num: f64 = gvx.data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let next = num / denom;
        normalize(&mut y);
        x = y;
        let done = (next - lam).abs() <= 1e-15 * next.abs();
        lam = lam.max(next);
        if done {
            break;
        }
    }
    Ok(lam.max(0.0).sqrt())
}

/// Central-difference gradient of `f` with respect to one parameter.
pub fn finite_diff_grad<F>(store: &mut ParamStore, param: ParamId, eps: f64, mut f: F) -> Tensor
where
    F: FnMut(&ParamStore) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let n = store.value(param).len();
    let mut grad = Tensor::zeros(store.value(param).shape());
    for i in 0..n {
        let orig = store.value(param).data()[i];
        store.get_mut(param).value.data_mut()[i] = orig + eps;
        let plus = f(store);
        store.get_mut(param).value.data_mut()[i] = orig - eps;
        let minus = f(store);
        store.get_mut(param).value.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}
