use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::param_gen::OdeMode;
use crate::ssm::{relevance_scores, selective_scan_segmented, ScanOptions, SegmentPlan};

fn tiny(kind: BlockKind) -> ModelConfig {
    ModelConfig {
        v: 2,
        lookback: 8,
        horizon: 4,
        d_model: 4,
        d_state: 4,
        rank: 2,
        n_layers: 1,
        ode_steps: 2,
        segment_length: 4,
        k_per_segment: 4,
        conv_width: 3,
        block_kind: kind,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn set(m: &mut ModeModel, name: &str, t: Tensor) {
    let id = m.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    m.store.set_value(id, t).unwrap();
}

fn zero_where(m: &mut ModeModel, pred: impl Fn(&str) -> bool) {
    for p in m.store.iter_mut() {
        if pred(&p.name) {
            p.value.data_mut().fill(0.0);
        }
    }
}

fn scan_core(m: &ModeModel, i: usize) -> &ScanCore {
    match &m.blocks()[i] {
        EncoderBlock::Scan { core, .. } => core,
        EncoderBlock::Linear(_) => panic!("linear block"),
    }
}

/// Runs block 0's scan on `u`, returning `(ys, hidden, deltas)`.
fn run_scan(m: &ModeModel, u: &Tensor) -> (Tensor, Tensor, Tensor) {
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let core = scan_core(m, 0);
    let delta = match core {
        ScanCore::Ode(gen) => gen.delta_graph(&mut g, &m.store, uv).unwrap(),
        ScanCore::Vanilla(_) => panic!("ode core expected"),
    };
    let mut c = OpCounter::default();
    let (ys, hs) = m.blocks()[0].scan(&mut g, &m.store, m.config(), core, uv, Some(delta), &mut c).unwrap();
    (g.value(ys).clone(), g.value(hs).clone(), g.value(delta).clone())
}

fn rows(t: &Tensor, b: usize) -> Tensor {
    let s = t.shape();
    let m = s[1] * s[2];
    Tensor::new(vec![s[1], s[2]], t.data()[b * m..(b + 1) * m].to_vec()).unwrap()
}

#[test]
fn forward_shape_contract() {
    let cfg = ModelConfig {
        v: 7,
        lookback: 96,
        horizon: 96,
        d_model: 8,
        d_state: 4,
        rank: 2,
        n_layers: 1,
        ode_steps: 1,
        ..ModelConfig::default()
    };
    let m = ModeModel::build_variant(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = m.predict(&rand_tensor(&[2, 96, 7], &mut rng), None).unwrap();
    assert_eq!(y.shape(), [2, 96, 7]);
    assert!(y.is_finite());
}

#[test]
fn identical_rows_identical_forecasts() {
    for kind in [BlockKind::ModeOde, BlockKind::VanillaMamba, BlockKind::Linear] {
        let m = ModeModel::build_variant(&tiny(kind)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = rand_tensor(&[1, 8, 2], &mut rng);
        let mut both = one.data().to_vec();
        both.extend_from_slice(one.data());
        let y = m.predict(&Tensor::new(vec![2, 8, 2], both).unwrap(), None).unwrap();
        let h = y.len() / 2;
        assert_eq!(&y.data()[..h], &y.data()[h..], "{kind:?}");
    }
}

#[test]
fn tokenizer_identity_and_bias() {
    let mut cfg = tiny(BlockKind::ModeOde);
    cfg.d_model = 2;
    let mut m = ModeModel::build_variant(&cfg).unwrap();
    set(&mut m, "tokenizer.weight", Tensor::eye(2));
    set(&mut m, "tokenizer.bias", Tensor::zeros(&[2]));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[3, 8, 2], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let t = m.tokenize_embed(&mut g, xv).unwrap();
    assert_eq!(g.value(t), &x);

    set(&mut m, "tokenizer.bias", Tensor::vector(vec![0.5, -2.0]));
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros(&[1, 8, 2]));
    let t = m.tokenize_embed(&mut g, xv).unwrap();
    for row in g.value(t).data().chunks(2) {
        assert_eq!(row, [0.5, -2.0]);
    }
}

#[test]
fn tokenizer_matches_hand_matmul() {
    let m = ModeModel::build_variant(&tiny(BlockKind::ModeOde)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[2, 8, 2], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let t = m.tokenize_embed(&mut g, xv).unwrap();
    let (w, b) = m.tokenizer_ids();
    let (w, b) = (m.store.value(w), m.store.value(b));
    for r in 0..16 {
        for j in 0..4 {
            let mut acc = b.data()[j];
            for i in 0..2 {
                acc += x.data()[r * 2 + i] * w.get(&[i, j]);
            }
            assert!((g.value(t).data()[r * 4 + j] - acc).abs() < 1e-14);
        }
    }
}

#[test]
fn head_identity_pipeline_and_bias_only() {
    let mut cfg = tiny(BlockKind::Linear);
    cfg.horizon = cfg.lookback;
    cfg.d_model = 2;
    cfg.n_layers = 0;
    let mut m = ModeModel::build_variant(&cfg).unwrap();
    set(&mut m, "tokenizer.weight", Tensor::new(vec![2, 2], vec![2.0, 1.0, 0.0, 1.0]).unwrap());
    set(&mut m, "tokenizer.bias", Tensor::vector(vec![0.3, -0.1]));
    // inverse of the tokenizer map
    set(&mut m, "head.feature.weight", Tensor::new(vec![2, 2], vec![0.5, -0.5, 0.0, 1.0]).unwrap());
    set(&mut m, "head.feature.bias", Tensor::vector(vec![-0.15, 0.25]));
    set(&mut m, "head.time.weight", Tensor::eye(8));
    set(&mut m, "head.time.bias", Tensor::zeros(&[8]));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[2, 8, 2], &mut rng);
    let y = m.predict(&x, None).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }

    let m = ModeModel::build_variant(&tiny(BlockKind::ModeOde)).unwrap();
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[1, 8, 4]));
    let y = m.forecast_head(&mut g, z).unwrap();
    let ((_, tb), (fw, fb)) = m.head_ids();
    let (tb, fw, fb) = (m.store.value(tb), m.store.value(fw), m.store.value(fb));
    for h in 0..4 {
        for j in 0..2 {
            let want: f64 = fb.data()[j] + tb.data()[h] * (0..4).map(|i| fw.get(&[i, j])).sum::<f64>();
            assert!((g.value(y).data()[h * 2 + j] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn residual_identity_with_zero_out_proj() {
    for kind in [BlockKind::ModeOde, BlockKind::VanillaMamba] {
        let mut cfg = tiny(kind);
        cfg.n_layers = 2;
        let mut m = ModeModel::build_variant(&cfg).unwrap();
        zero_where(&mut m, |n| n.contains("out_proj"));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[3, 8, 2], &mut rng);
        let y = m.predict(&x, None).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let t = m.tokenize_embed(&mut g, xv).unwrap();
        let h = m.forecast_head(&mut g, t).unwrap();
        assert_eq!(&y, g.value(h), "{kind:?}");
    }
}

#[test]
fn zero_tokens_give_zero_block_output() {
    for (kind, mode) in [
        (BlockKind::ModeOde, OdeMode::Static),
        (BlockKind::ModeOde, OdeMode::Dynamic),
        (BlockKind::VanillaMamba, OdeMode::Static),
        (BlockKind::Linear, OdeMode::Static),
    ] {
        let mut cfg = tiny(kind);
        cfg.ode_mode = mode;
        let mut m = ModeModel::build_variant(&cfg).unwrap();
        zero_where(&mut m, |n| {
            n.starts_with("blocks") && n.ends_with("bias") && !n.contains("delta") && !n.contains(".f_")
        });
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 8, 4]));
        let mut c = OpCounter::default();
        let o = m.blocks()[0].forward(&mut g, &m.store, m.config(), z, None, &mut c).unwrap();
        assert!(g.value(o.out).data().iter().all(|&v| v == 0.0), "{kind:?} {mode:?}");
    }
}

fn kernel_check(mode: OdeMode, k: usize, clamp: Option<f64>, integrator: crate::ssm::Integrator) {
    let mut cfg = tiny(BlockKind::ModeOde);
    cfg.ode_mode = mode;
    cfg.k_per_segment = k;
    cfg.clamp = clamp;
    cfg.integrator = integrator;
    cfg.lookback = 10;
    let mut m = ModeModel::build_variant(&cfg).unwrap();
    if clamp.is_some() {
        // push the static factors well outside the bound
        for p in m.store.iter_mut() {
            if p.name.ends_with(".U") || p.name.contains("f_U.1.bias") {
                p.value = p.value.scale(6.0);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7 + k as u64);
    let u = rand_tensor(&[3, 10, 4], &mut rng);
    let (ys, hs, deltas) = run_scan(&m, &u);
    let ScanCore::Ode(gen) = scan_core(&m, 0) else { unreachable!() };
    for b in 0..3 {
        let ub = rows(&u, b);
        let dl = &deltas.data()[b * 10..(b + 1) * 10];
        let factors: Vec<_> = (0..10)
            .map(|t| {
                let x = Tensor::vector(ub.data()[t * 4..(t + 1) * 4].to_vec());
                gen.generate_factors(&m.store, &x, dl[t]).unwrap()
            })
            .collect();
        let plan = SegmentPlan::new(&relevance_scores(dl), cfg.segment_length, k).unwrap();
        let opts = ScanOptions {
            a_decay: gen.a_decay(&m.store),
            ode_steps: cfg.ode_steps,
            integrator,
            clamp,
        };
        let want = selective_scan_segmented(&factors, &ub, &plan, &opts).unwrap();
        for (a, e) in rows(&ys, b).data().iter().zip(want.ys.data()) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{mode:?} k={k}: {a} vs {e}");
        }
        for (a, e) in rows(&hs, b).data().iter().zip(want.hidden.data()) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }
}

#[test]
fn tape_scan_matches_kernel() {
    use crate::ssm::Integrator::{Euler, Heun};
    for mode in [OdeMode::Static, OdeMode::Dynamic] {
        for k in [4, 2, 1, 0] {
            kernel_check(mode, k, None, Heun);
        }
        kernel_check(mode, 2, None, Euler);
        kernel_check(mode, 4, Some(0.9), Heun);
    }
}

#[test]
fn selection_changes_only_unselected_steps_onward() {
    let mut full = tiny(BlockKind::ModeOde);
    full.lookback = 12;
    let mut part = full.clone();
    part.k_per_segment = 2;
    let mf = ModeModel::build_variant(&full).unwrap();
    let mp = ModeModel::build_variant(&part).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = rand_tensor(&[2, 12, 4], &mut rng);
    let (yf, _, deltas) = run_scan(&mf, &u);
    let (yp, _, _) = run_scan(&mp, &u);
    for b in 0..2 {
        let plan = SegmentPlan::new(&relevance_scores(&deltas.data()[b * 12..(b + 1) * 12]), 4, 2).unwrap();
        let first = (0..12).find(|&t| !plan.is_selected(t)).unwrap();
        let (rf, rp) = (rows(&yf, b), rows(&yp, b));
        assert_eq!(rf.data()[..first * 4], rp.data()[..first * 4]);
        assert_ne!(rf.data()[first * 4..(first + 1) * 4], rp.data()[first * 4..(first + 1) * 4]);
    }
}

#[test]
fn same_seed_shares_tokenizer() {
    let a = ModeModel::build_variant(&tiny(BlockKind::ModeOde)).unwrap();
    let b = ModeModel::build_variant(&tiny(BlockKind::VanillaMamba)).unwrap();
    let c = ModeModel::build_variant(&tiny(BlockKind::Linear)).unwrap();
    for m in [&b, &c] {
        assert_eq!(m.store.value(m.tokenizer_ids().0), a.store.value(a.tokenizer_ids().0));
        assert_eq!(m.store.value(m.tokenizer_ids().1), a.store.value(a.tokenizer_ids().1));
    }
}

#[test]
fn linear_variant_is_smaller() {
    let a = ModeModel::build_variant(&tiny(BlockKind::ModeOde)).unwrap();
    let c = ModeModel::build_variant(&tiny(BlockKind::Linear)).unwrap();
    assert!(c.param_count() < a.param_count());
}

#[test]
fn diagonal_ode_agrees_with_zoh_recurrence() {
    let mut cfg = tiny(BlockKind::ModeOde);
    cfg.d_model = 1;
    cfg.d_state = 3;
    cfg.rank = 3;
    cfg.ode_steps = 16;
    cfg.lookback = 20;
    let mut ode = ModeModel::build_variant(&cfg).unwrap();
    cfg.block_kind = BlockKind::VanillaMamba;
    let mut van = ModeModel::build_variant(&cfg).unwrap();
    let a = [-0.3, -0.8, -1.5];
    let diag = |v: &[f64]| {
        let mut t = Tensor::zeros(&[3, 3]);
        for (i, &x) in v.iter().enumerate() {
            t.set(&[i, i], x);
        }
        t
    };
    let b = Tensor::new(vec![3, 1], vec![0.5, -1.0, 0.8]).unwrap();
    let c = Tensor::new(vec![1, 3], vec![1.0, 0.4, -0.7]).unwrap();
    set(&mut ode, "blocks.0.gen.U", diag(&a));
    set(&mut ode, "blocks.0.gen.V", Tensor::eye(3));
    set(&mut ode, "blocks.0.gen.B", b.clone());
    set(&mut ode, "blocks.0.gen.C", c.clone());
    set(&mut ode, "blocks.0.gen.delta.weight", Tensor::new(vec![1, 1], vec![0.4]).unwrap());
    set(&mut ode, "blocks.0.gen.delta.bias", Tensor::vector(vec![-0.2]));
    set(&mut van, "blocks.0.ssm.a_log", Tensor::vector(a.iter().map(|x: &f64| (-x).ln()).collect()));
    set(&mut van, "blocks.0.ssm.B", b);
    set(&mut van, "blocks.0.ssm.C", c);
    set(&mut van, "blocks.0.ssm.delta.weight", Tensor::new(vec![1, 1], vec![0.4]).unwrap());
    set(&mut van, "blocks.0.ssm.delta.bias", Tensor::vector(vec![-0.2]));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u = rand_tensor(&[2, 20, 1], &mut rng);
    let (yo, _, _) = run_scan(&ode, &u);
    let mut g = Graph::new();
    let uv = g.constant(u);
    let mut cnt = OpCounter::default();
    let (yv, _) = van.blocks()[0].scan(&mut g, &van.store, van.config(), scan_core(&van, 0), uv, None, &mut cnt).unwrap();
    let err = yo.sub(g.value(yv)).unwrap().max_abs();
    assert!(err < 1e-3, "{err}");
}

fn causality_case(cfg: &ModelConfig, seed: u64) -> (usize, Tensor, Tensor) {
    let m = ModeModel::build_variant(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&[1, cfg.lookback, cfg.v], &mut rng);
    let t = rng.gen_range(0..cfg.lookback);
    let mut xp = x.clone();
    xp.data_mut()[t * cfg.v] += 0.5;
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tok = m.tokenize_embed(&mut g, xv).unwrap();
        let mut c = OpCounter::default();
        let o = m.blocks()[0].forward(&mut g, &m.store, cfg, tok, None, &mut c).unwrap();
        g.value(o.out).clone()
    };
    (t, run(&x), run(&xp))
}

#[test]
fn blocks_are_causal() {
    for (kind, mode) in [
        (BlockKind::ModeOde, OdeMode::Static),
        (BlockKind::ModeOde, OdeMode::Dynamic),
        (BlockKind::VanillaMamba, OdeMode::Static),
        (BlockKind::Linear, OdeMode::Static),
    ] {
        let mut cfg = tiny(kind);
        cfg.ode_mode = mode;
        cfg.lookback = 12;
        for seed in 0..10 {
            let (t, a, b) = causality_case(&cfg, seed);
            let dm = cfg.d_model;
            assert_eq!(a.data()[..t * dm], b.data()[..t * dm], "{kind:?} {mode:?}");
            assert_ne!(a.data()[t * dm..], b.data()[t * dm..]);
        }
    }
}

#[test]
fn partial_selection_is_causal_per_segment() {
    let mut cfg = tiny(BlockKind::ModeOde);
    cfg.lookback = 12;
    cfg.k_per_segment = 1;
    for seed in 0..10 {
        let (t, a, b) = causality_case(&cfg, seed);
        let start = t / cfg.segment_length * cfg.segment_length;
        assert_eq!(a.data()[..start * 4], b.data()[..start * 4]);
    }
}

#[test]
fn head_only_linear_model_is_explicit_linear_map() {
    let mut cfg = tiny(BlockKind::Linear);
    cfg.n_layers = 0;
    let m = ModeModel::build_variant(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&[1, 8, 2], &mut rng);
    let y = m.predict(&x, None).unwrap();
    let (tw, tb) = m.tokenizer_ids();
    let ((hw, hb), (fw, fb)) = m.head_ids();
    let [tw, tb, hw, hb, fw, fb] = [tw, tb, hw, hb, fw, fb].map(|id| m.store.value(id));
    let xm = x.clone().reshape(&[8, 2]).unwrap();
    let tok = xm.matmul(tw).unwrap();
    let tok = Tensor::new(
        vec![8, 4],
        tok.data().iter().enumerate().map(|(i, v)| v + tb.data()[i % 4]).collect(),
    )
    .unwrap();
    let mixed = hw.matmul(&tok).unwrap();
    let mut want = Vec::new();
    for h in 0..4 {
        for j in 0..2 {
            let mut acc = fb.data()[j];
            for i in 0..4 {
                let tok_hi = mixed.get(&[h, i]) + hb.data()[h];
                acc += tok_hi * fw.get(&[i, j]);
            }
            want.push(acc);
        }
    }
    for (a, e) in y.data().iter().zip(&want) {
        assert!((a - e).abs() < 1e-13);
    }
}

#[test]
fn timestamp_mode_needs_deltas() {
    let mut cfg = tiny(BlockKind::ModeOde);
    cfg.delta_source = DeltaSource::Timestamps;
    let m = ModeModel::build_variant(&cfg).unwrap();
    let x = Tensor::zeros(&[1, 8, 2]);
    assert!(m.predict(&x, None).is_err());
    let y = m.predict(&x, Some(&Tensor::full(&[1, 8], 1.0))).unwrap();
    assert_eq!(y.shape(), [1, 4, 2]);
    assert!(m.predict(&x, Some(&Tensor::full(&[1, 7], 1.0))).is_err());
}

#[test]
fn invalid_configs_rejected() {
    let base = tiny(BlockKind::ModeOde);
    let bad = [
        ModelConfig { horizon: 0, ..base.clone() },
        ModelConfig { conv_width: 9, ..base.clone() },
        ModelConfig { segment_length: 0, ..base.clone() },
        ModelConfig { k_per_segment: 5, ..base.clone() },
        ModelConfig { rank: 5, ..base.clone() },
        ModelConfig { clamp: Some(1.5), ..base.clone() },
    ];
    for cfg in bad {
        assert!(matches!(ModeModel::build_variant(&cfg), Err(Error::Config(_))));
    }
    assert!("mamba2".parse::<BlockKind>().is_err());
    assert_eq!("vanilla_mamba".parse::<BlockKind>().unwrap(), BlockKind::VanillaMamba);
}
