use mode_core::data::{destandardize, make_windows, RawSeries, SplitTag, STD_EPS};
use mode_core::numerics::Tensor;
use mode_core::ssm::{lowrank_apply, stability_clamp, zoh_discretize, LowRankFactors, OpCounter, SegmentPlan};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn factors() -> impl Strategy<Value = (LowRankFactors, Tensor)> {
    (1usize..=8)
        .prop_flat_map(|d| (Just(d), 1..=d))
        .prop_flat_map(|(d, r)| (tensor(vec![d, r]), tensor(vec![d, r]), tensor(vec![d])))
        .prop_map(|(u, v, h)| {
            let d = u.shape()[0];
            let f = LowRankFactors::new(u, v, Tensor::zeros(&[d, 1]), Tensor::zeros(&[1, d]), None, 1.0).unwrap();
            (f, h)
        })
}

proptest! {
    #[test]
    fn lowrank_matches_dense_product((f, h) in factors()) {
        let got = lowrank_apply(&f, &h, &mut OpCounter::default()).unwrap();
        let a = f.u.matmul(&f.v.transpose().unwrap()).unwrap();
        let d = h.len();
        let want = a.matmul(&h.clone().reshape(&[d, 1]).unwrap()).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn clamp_makes_transition_contractive((f, h) in factors(), alpha in 0.1f64..0.99) {
        let c = stability_clamp(&f, alpha).unwrap();
        let ah = lowrank_apply(&c, &h, &mut OpCounter::default()).unwrap();
        prop_assert!(ah.norm2() <= alpha * h.norm2() * (1.0 + 1e-6) + 1e-12);
    }

    #[test]
    fn segment_plan_keeps_top_k(scores in prop::collection::vec(0.0f64..1.0, 1..60), s in 1usize..10, k_frac in 0.0f64..=1.0) {
        let k = (k_frac * s as f64).floor() as usize;
        let plan = SegmentPlan::new(&scores, s, k).unwrap();
        for (seg, chosen) in plan.selected().iter().enumerate() {
            let lo = seg * s;
            let hi = (lo + s).min(scores.len());
            prop_assert_eq!(chosen.len(), k.min(hi - lo));
            let floor = chosen.iter().map(|&t| scores[t]).fold(f64::INFINITY, f64::min);
            for t in lo..hi {
                if !plan.is_selected(t) {
                    prop_assert!(scores[t] <= floor);
                }
            }
        }
    }

    #[test]
    fn zoh_decay_stays_in_unit_interval(a in -10.0f64..0.0, dt in 1e-4f64..5.0, b in -3.0f64..3.0) {
        let (ab, bb) = zoh_discretize(&Tensor::vector(vec![a]), &Tensor::new(vec![1, 1], vec![b]).unwrap(), dt).unwrap();
        prop_assert!(ab.item() > 0.0 && ab.item() <= 1.0);
        // |B̄| never exceeds the Euler bound Δ·|b|
        prop_assert!(bb.item().abs() <= dt * b.abs() * (1.0 + 1e-12));
    }

    #[test]
    fn standardize_round_trips(vals in prop::collection::vec(-50.0f64..50.0, 40), shift in -1e3f64..1e3) {
        let data: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let s = RawSeries { timestamps: None, values: Tensor::new(vec![20, 2], data).unwrap(), names: vec!["a".into(), "b".into()] };
        let w = make_windows(&s, 6, 3, 1, SplitTag::Test).unwrap();
        let z = w.standardize(STD_EPS);
        let back = destandardize(&z.targets, z.stats.as_ref().unwrap()).unwrap();
        for (x, y) in back.data().iter().zip(w.targets.data()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }
}
