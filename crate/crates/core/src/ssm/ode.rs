use num_traits::Float;

use super::lowrank::{dense_apply_raw, lowrank_apply_raw};
use super::{HiddenState, Integrator, LowRankFactors, OpCounter};
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// Advances `h` by `steps` fixed sub-steps of `h' = A·h + bx` with total
/// span `span`, where `apply(h, out)` writes `A·h`. Returns the number of
/// `apply` calls made.
pub fn integrate_raw<T: Float>(
    h: &mut [T],
    bx: &[T],
    span: T,
    steps: usize,
    method: Integrator,
    apply: &mut impl FnMut(&[T], &mut [T]),
) -> usize {
    let d = h.len();
    let dt = span / T::from(steps).unwrap();
    let mut k1 = vec![T::zero(); d];
    let mut k2 = vec![T::zero(); d];
    let mut hp = vec![T::zero(); d];
    for _ in 0..steps {
        apply(h, &mut k1);
        for (k, &b) in k1.iter_mut().zip(bx) {
            *k = *k + b;
        }
        match method {
            Integrator::Euler => {
                for (hi, &k) in h.iter_mut().zip(&k1) {
                    *hi = *hi + dt * k;
                }
            }
            Integrator::Heun => {
                for i in 0..d {
                    hp[i] = h[i] + dt * k1[i];
                }
                apply(&hp, &mut k2);
                let half = dt / T::from(2.0).unwrap();
                for i in 0..d {
                    k2[i] = k2[i] + bx[i];
                    h[i] = h[i] + half * (k1[i] + k2[i]);
                }
            }
        }
    }
    steps * method.stages()
}

fn check_state(f: &LowRankFactors, h: &HiddenState, x: &Tensor, steps: usize) -> Result<usize> {
    let (d, _) = f.dims();
    if steps == 0 {
        return Err(Error::Config("ODE sub-step count must be at least 1".into()));
    }
    if h.h.len() != d || x.len() != f.v_in() {
        return shape_err(
            "ode_integrate_step",
            format!("h {:?}, x {:?} for d={d}, v_in={}", h.h.shape(), x.shape(), f.v_in()),
        );
    }
    Ok(d)
}

fn finish(h: Vec<f64>, step_index: usize) -> Result<HiddenState> {
    let h = Tensor::vector(h);
    if !h.is_finite() {
        return Err(Error::NonFinite {
            op: format!("ode_integrate_step at token {step_index}"),
        });
    }
    Ok(HiddenState { h, step_index: step_index + 1 })
}

/// One token interval of the low-rank dynamics `h' = U·Vᵀ·h + B·x`.
///
/// The input is held constant over the interval of length `f.delta`,
/// which is crossed in `steps` explicit sub-steps.
pub fn ode_integrate_step(
    f: &LowRankFactors,
    state: &HiddenState,
    x: &Tensor,
    steps: usize,
    method: Integrator,
    counter: &mut OpCounter,
) -> Result<HiddenState> {
    let d = check_state(f, state, x, steps)?;
    let (_, r) = f.dims();
    let bx = f.inject(x, counter)?;
    let mut h = state.h.data().to_vec();
    let mut z = vec![0.0; r];
    let (u, v) = (f.u.data(), f.v.data());
    let applies = integrate_raw(&mut h, bx.data(), f.delta, steps, method, &mut |hin, out| {
        lowrank_apply_raw(u, v, d, r, hin, &mut z, out)
    });
    counter.transition_macs += (applies * 2 * d * r) as u64;
    finish(h, state.step_index)
}

/// Same update with an explicit `d×d` transition; the dense contrast path.
pub fn dense_ode_integrate_step(
    a: &Tensor,
    f: &LowRankFactors,
    state: &HiddenState,
    x: &Tensor,
    steps: usize,
    method: Integrator,
    counter: &mut OpCounter,
) -> Result<HiddenState> {
    let d = check_state(f, state, x, steps)?;
    if a.shape() != [d, d] {
        return shape_err("dense_ode_integrate_step", format!("A {:?} for d={d}", a.shape()));
    }
    let bx = f.inject(x, counter)?;
    let mut h = state.h.data().to_vec();
    let applies = integrate_raw(&mut h, bx.data(), f.delta, steps, method, &mut |hin, out| {
        dense_apply_raw(a.data(), d, hin, out)
    });
    counter.dense_transition_macs += (applies * d * d) as u64;
    finish(h, state.step_index)
}

/// Discrete map `h ← U·Vᵀ·h + Δ·B·x`: one step of the contraction
/// recursion whose bound is `β/(1−α)` when `‖UVᵀ‖₂ ≤ α` and `‖Δ·B·x‖₂ ≤ β`.
pub fn contractive_step(f: &LowRankFactors, h: &Tensor, x: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
    let ah = super::lowrank_apply(f, h, counter)?;
    let bx = f.inject(x, counter)?;
    ah.add(&bx.scale(f.delta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_factors(a: f64, b: f64, delta: f64) -> LowRankFactors {
        LowRankFactors::new(
            Tensor::new(vec![1, 1], vec![a]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![b]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            None,
            delta,
        )
        .unwrap()
    }

    fn run(f: &LowRankFactors, x: f64, steps: usize, m: Integrator) -> f64 {
        let mut c = OpCounter::default();
        ode_integrate_step(f, &HiddenState::zeros(1), &Tensor::vector(vec![x]), steps, m, &mut c)
            .unwrap()
            .h
            .item()
    }

    #[test]
    fn zero_transition_adds_delta_bx() {
        let f = LowRankFactors::new(
            Tensor::zeros(&[2, 1]),
            Tensor::zeros(&[2, 1]),
            Tensor::eye(2),
            Tensor::eye(2),
            None,
            1.0,
        )
        .unwrap();
        for m in [Integrator::Euler, Integrator::Heun] {
            let mut c = OpCounter::default();
            let s = ode_integrate_step(&f, &HiddenState::zeros(2), &Tensor::vector(vec![1.0, 2.0]), 4, m, &mut c).unwrap();
            assert_eq!(s.h.data(), &[1.0, 2.0]);
            assert_eq!(s.step_index, 1);
        }
    }

    #[test]
    fn scalar_linear_ode() {
        let f = scalar_factors(-1.0, 1.0, 0.5);
        assert_eq!(run(&f, 1.0, 1, Integrator::Euler), 0.5);
        // closed form of h' = -h + 1 from 0 over 0.5
        let exact = 1.0 - (-0.5f64).exp();
        assert!((exact - 0.393_469).abs() < 1e-6);
        assert!((run(&f, 1.0, 8, Integrator::Heun) - exact).abs() < 1e-3);
    }

    #[test]
    fn zero_fixed_point() {
        let f = LowRankFactors::new(
            Tensor::new(vec![2, 1], vec![0.7, -0.3]).unwrap(),
            Tensor::new(vec![2, 1], vec![0.2, 0.9]).unwrap(),
            Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap(),
            Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
            None,
            0.8,
        )
        .unwrap();
        let mut c = OpCounter::default();
        let s = ode_integrate_step(&f, &HiddenState::zeros(2), &Tensor::vector(vec![0.0]), 3, Integrator::Heun, &mut c).unwrap();
        assert_eq!(s.h.data(), &[0.0, 0.0]);
    }

    #[test]
    fn heun_is_second_order() {
        let f = scalar_factors(-1.0, 1.0, 0.5);
        let exact = 1.0 - (-0.5f64).exp();
        let errs: Vec<f64> = [1, 2, 4, 8, 16].iter().map(|&t| (run(&f, 1.0, t, Integrator::Heun) - exact).abs()).collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 1.8, "observed order {order}");
        }
    }

    #[test]
    fn counts_two_dr_per_stage() {
        let f = LowRankFactors::new(
            Tensor::full(&[4, 2], 0.1),
            Tensor::full(&[4, 2], 0.1),
            Tensor::full(&[4, 3], 0.1),
            Tensor::full(&[3, 4], 0.1),
            None,
            0.5,
        )
        .unwrap();
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        for (m, stages) in [(Integrator::Euler, 1), (Integrator::Heun, 2)] {
            let mut c = OpCounter::default();
            ode_integrate_step(&f, &HiddenState::zeros(4), &x, 3, m, &mut c).unwrap();
            assert_eq!(c.transition_macs, (2 * 4 * 2 * 3 * stages) as u64);
            assert_eq!(c.input_macs, 12);
        }
    }

    #[test]
    fn dense_path_agrees_with_lowrank() {
        let f = LowRankFactors::new(
            Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.05, -0.4, 0.2]).unwrap(),
            Tensor::new(vec![3, 2], vec![0.5, 0.1, -0.3, 0.2, 0.1, 0.4]).unwrap(),
            Tensor::new(vec![3, 1], vec![1.0, 0.5, -0.5]).unwrap(),
            Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap(),
            None,
            0.7,
        )
        .unwrap();
        let a = f.u.matmul(&f.v.transpose().unwrap()).unwrap();
        let x = Tensor::vector(vec![0.9]);
        let mut c1 = OpCounter::default();
        let mut c2 = OpCounter::default();
        let s = HiddenState { h: Tensor::vector(vec![0.2, -0.1, 0.3]), step_index: 0 };
        let lr = ode_integrate_step(&f, &s, &x, 4, Integrator::Heun, &mut c1).unwrap();
        let de = dense_ode_integrate_step(&a, &f, &s, &x, 4, Integrator::Heun, &mut c2).unwrap();
        for (p, q) in lr.h.data().iter().zip(de.h.data()) {
            assert!((p - q).abs() < 1e-14);
        }
        assert_eq!(c2.dense_transition_macs, 4 * 2 * 9);
    }

    #[test]
    fn zero_steps_rejected() {
        let f = scalar_factors(-1.0, 1.0, 0.5);
        let mut c = OpCounter::default();
        assert!(ode_integrate_step(&f, &HiddenState::zeros(1), &Tensor::vector(vec![1.0]), 0, Integrator::Heun, &mut c).is_err());
    }

    #[test]
    fn divergence_reported() {
        let f = scalar_factors(1e5, 1.0, 5.0);
        let mut c = OpCounter::default();
        let s = HiddenState { h: Tensor::vector(vec![1.0]), step_index: 0 };
        let mut st = s;
        let mut failed = false;
        for _ in 0..100 {
            match ode_integrate_step(&f, &st, &Tensor::vector(vec![1.0]), 1, Integrator::Euler, &mut c) {
                Ok(n) => st = n,
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        assert!(failed);
    }
}
