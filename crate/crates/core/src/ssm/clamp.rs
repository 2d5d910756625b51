use super::LowRankFactors;
use crate::error::Result;
use crate::numerics::lowrank_spectral_norm;

const NORM_ITERS: usize = 1000;

/// Rescales `U` so that `‖U·Vᵀ‖₂ ≤ alpha_max`; factors already inside the
/// bound are returned unchanged.
pub fn stability_clamp(f: &LowRankFactors, alpha_max: f64) -> Result<LowRankFactors> {
    assert!(alpha_max > 0.0 && alpha_max < 1.0, "alpha_max must lie in (0, 1)");
    let s = lowrank_spectral_norm(&f.u, &f.v, NORM_ITERS)?;
    if s <= alpha_max {
        return Ok(f.clone());
    }
    let mut out = f.clone();
    out.u = f.u.scale(alpha_max / s);
    Ok(out)
}

/// Scale factor the clamp would apply, `min(1, alpha_max / ‖UVᵀ‖₂)`.
pub(crate) fn clamp_factor(u: &crate::numerics::Tensor, v: &crate::numerics::Tensor, alpha_max: f64) -> Result<f64> {
    let s = lowrank_spectral_norm(u, v, NORM_ITERS)?;
    Ok(if s > alpha_max { alpha_max / s } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{spectral_norm_estimate, Tensor};

    fn with_uv(u: Tensor, v: Tensor) -> LowRankFactors {
        let d = u.shape()[0];
        LowRankFactors::new(u, v, Tensor::zeros(&[d, 1]), Tensor::zeros(&[1, d]), None, 1.0).unwrap()
    }

    #[test]
    fn identity_clamped_to_alpha() {
        let f = with_uv(Tensor::eye(3), Tensor::eye(3));
        let c = stability_clamp(&f, 0.9).unwrap();
        let dense = c.u.matmul(&c.v.transpose().unwrap()).unwrap();
        let s = spectral_norm_estimate(&dense, 100).unwrap();
        assert!((s - 0.9).abs() < 1e-6);
        // explicit norm oracle: UVᵀ = 0.9·I
        assert!((dense.max_abs() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_factors_unchanged() {
        let f = with_uv(Tensor::zeros(&[3, 2]), Tensor::zeros(&[3, 2]));
        assert_eq!(stability_clamp(&f, 0.9).unwrap(), f);
    }

    #[test]
    fn inside_bound_is_bit_identical() {
        let f = with_uv(Tensor::eye(2).scale(0.5), Tensor::eye(2));
        let c = stability_clamp(&f, 0.9).unwrap();
        assert_eq!(c, f);
    }

    #[test]
    fn random_factors_respect_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = rng.gen_range(1..=8);
            let r = rng.gen_range(1..=d);
            let mut m = |n| Tensor::new(vec![d, r], (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let f = with_uv(m(d * r), m(d * r));
            let c = stability_clamp(&f, 0.9).unwrap();
            let dense = c.u.matmul(&c.v.transpose().unwrap()).unwrap();
            let s = spectral_norm_estimate(&dense, 2000).unwrap();
            assert!(s <= 0.9 * (1.0 + 1e-6), "norm {s}");
        }
    }
}
