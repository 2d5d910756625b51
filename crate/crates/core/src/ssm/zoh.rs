use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// Zero-order-hold discretization of a diagonal system.
///
/// Per channel `i`: `ā = e^{Δaᵢ}` and `b̄ᵢ = (e^{Δaᵢ} − 1)/aᵢ · bᵢ`, the
/// standard hold formula `(ΔA)⁻¹(e^{ΔA} − I)·ΔB`. A channel with `aᵢ = 0`
/// takes the limit `b̄ᵢ = Δ·bᵢ`.
pub fn zoh_discretize(a_diag: &Tensor, b: &Tensor, delta: f64) -> Result<(Tensor, Tensor)> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!("step size must be positive, got {delta}")));
    }
    let d = a_diag.len();
    let [bd, v_in] = b.dims2("zoh_discretize")?;
    if bd != d || a_diag.rank() != 1 {
        return shape_err("zoh_discretize", format!("a {:?}, b {:?}", a_diag.shape(), b.shape()));
    }
    let a_bar = a_diag.map(|a| (delta * a).exp());
    let mut b_bar = b.clone();
    for (i, &a) in a_diag.data().iter().enumerate() {
        let gain = if a == 0.0 { delta } else { (delta * a).exp_m1() / a };
        for x in &mut b_bar.data_mut()[i * v_in..(i + 1) * v_in] {
            *x *= gain;
        }
    }
    Ok((a_bar, b_bar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_closed_form() {
        let (ab, bb) = zoh_discretize(&Tensor::vector(vec![-1.0]), &Tensor::new(vec![1, 1], vec![1.0]).unwrap(), 0.5).unwrap();
        assert!((ab.item() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((ab.item() - 0.606_531).abs() < 1e-6);
        assert!((bb.item() - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((bb.item() - 0.393_469).abs() < 1e-6);
    }

    #[test]
    fn vanishing_step_limit() {
        let (ab, bb) = zoh_discretize(&Tensor::vector(vec![-2.0]), &Tensor::new(vec![1, 1], vec![3.0]).unwrap(), 1e-12).unwrap();
        assert!((ab.item() - 1.0).abs() < 1e-11);
        assert!(bb.item().abs() < 1e-10);
    }

    #[test]
    fn zero_channel_limit() {
        let (ab, bb) = zoh_discretize(&Tensor::vector(vec![0.0]), &Tensor::new(vec![1, 1], vec![2.0]).unwrap(), 0.5).unwrap();
        assert_eq!(ab.item(), 1.0);
        assert_eq!(bb.item(), 1.0);
        // near-zero channels approach the limit continuously
        let (_, near) = zoh_discretize(&Tensor::vector(vec![-1e-10]), &Tensor::new(vec![1, 1], vec![2.0]).unwrap(), 0.5).unwrap();
        assert!((near.item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(zoh_discretize(&Tensor::vector(vec![-1.0]), &Tensor::new(vec![1, 1], vec![1.0]).unwrap(), 0.0).is_err());
    }
}
