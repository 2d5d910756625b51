use num_traits::Float;

use super::{LowRankFactors, OpCounter};
use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

/// `out = U·(Vᵀ·h)` on raw row-major buffers; `U`, `V` are `d×r`.
///
/// `z` is scratch of length `r`. Never forms the `d×d` product.
pub fn lowrank_apply_raw<T: Float>(u: &[T], v: &[T], d: usize, r: usize, h: &[T], z: &mut [T], out: &mut [T]) {
    z.iter_mut().for_each(|x| *x = T::zero());
    for i in 0..d {
        let hi = h[i];
        let vrow = &v[i * r..(i + 1) * r];
        for (zj, &vij) in z.iter_mut().zip(vrow) {
            *zj = *zj + vij * hi;
        }
    }
    for i in 0..d {
        let urow = &u[i * r..(i + 1) * r];
        out[i] = urow.iter().zip(z.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    }
}

/// `out = A·h` for an explicit `d×d` matrix.
pub fn dense_apply_raw<T: Float>(a: &[T], d: usize, h: &[T], out: &mut [T]) {
    for i in 0..d {
        out[i] = a[i * d..(i + 1) * d].iter().zip(h).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    }
}

/// Low-rank transition applied factor-first; adds `2·d·r` to the counter.
pub fn lowrank_apply(f: &LowRankFactors, h: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
    let (d, r) = f.dims();
    if h.len() != d {
        return shape_err("lowrank_apply", format!("h has {} entries, factors expect {d}", h.len()));
    }
    let mut z = vec![0.0; r];
    let mut out = vec![0.0; d];
    lowrank_apply_raw(f.u.data(), f.v.data(), d, r, h.data(), &mut z, &mut out);
    counter.transition_macs += (2 * d * r) as u64;
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factors(u: Vec<f64>, v: Vec<f64>, d: usize, r: usize) -> LowRankFactors {
        LowRankFactors::new(
            Tensor::new(vec![d, r], u).unwrap(),
            Tensor::new(vec![d, r], v).unwrap(),
            Tensor::zeros(&[d, 1]),
            Tensor::zeros(&[1, d]),
            None,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn rank_one_example() {
        let f = factors(vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0], 3, 1);
        let h = Tensor::vector(vec![1.0, 1.0, 1.0]);
        // dense oracle: (U Vᵀ) h
        let dense = f.u.matmul(&f.v.transpose().unwrap()).unwrap().matvec(&h).unwrap();
        let mut c = OpCounter::default();
        let out = lowrank_apply(&f, &h, &mut c).unwrap();
        assert_eq!(out, dense);
        assert_eq!(out.data(), &[2.0, 0.0, 4.0]);
        assert_eq!(c.transition_macs, 6);
    }

    #[test]
    fn zero_v_gives_zero() {
        let f = factors(vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4], 2, 2);
        let mut c = OpCounter::default();
        let out = lowrank_apply(&f, &Tensor::vector(vec![5.0, -3.0]), &mut c).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_factors() {
        let i3 = Tensor::eye(3).into_data();
        let f = factors(i3.clone(), i3, 3, 3);
        let h = Tensor::vector(vec![0.5, -2.0, 7.0]);
        let mut c = OpCounter::default();
        assert_eq!(lowrank_apply(&f, &h, &mut c).unwrap(), h);
    }

    #[test]
    fn shape_mismatch() {
        let f = factors(vec![1.0; 3], vec![1.0; 3], 3, 1);
        let mut c = OpCounter::default();
        assert!(lowrank_apply(&f, &Tensor::vector(vec![1.0; 4]), &mut c).is_err());
    }
}
