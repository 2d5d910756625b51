use super::*;

fn ramp(n: usize, v: usize, interval: f64) -> RawSeries {
    RawSeries {
        timestamps: Some((0..n).map(|i| i as f64 * interval).collect()),
        values: Tensor::new(vec![n, v], (0..n * v).map(|i| i as f64).collect()).unwrap(),
        names: (0..v).map(|c| format!("c{c}")).collect(),
    }
}

#[test]
fn window_count_formula() {
    let s = ramp(10, 1, 1.0);
    assert_eq!(make_windows(&s, 4, 2, 1, SplitTag::Train).unwrap().len(), 5);
    assert_eq!(make_windows(&s, 4, 2, 10, SplitTag::Train).unwrap().len(), 1);
    assert_eq!(make_windows(&s, 4, 2, 3, SplitTag::Train).unwrap().len(), 2);
    assert!(make_windows(&s, 8, 3, 1, SplitTag::Train).is_err());
}

#[test]
fn windows_do_not_leak() {
    let s = ramp(40, 2, 1.0);
    let w = make_windows(&s, 6, 3, 2, SplitTag::Train).unwrap();
    for m in 0..w.len() {
        let (x, y, _) = w.batch(&[m]);
        let last_in = x.data()[x.len() - 2] as usize / 2;
        let first_out = y.data()[0] as usize / 2;
        assert_eq!(first_out, last_in + 1);
        assert_eq!(w.target_starts[m], w.origins[m] + 6);
        assert_eq!(x.data()[0] as usize / 2, w.origins[m]);
    }
}

#[test]
fn regular_windows_have_unit_deltas() {
    let s = ramp(30, 1, 900.0);
    let w = make_windows(&s, 5, 2, 1, SplitTag::Train).unwrap();
    assert!(w.deltas.unwrap().data().iter().all(|&d| d == 1.0));
}

#[test]
fn ratio_split() {
    let s = ramp(100, 1, 1.0);
    let [a, b, c] = chronological_split(&s, &SplitSpec::Ratios([0.7, 0.1, 0.2])).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (70, 10, 20));
    assert_eq!(b.values.data()[0], 70.0);
    assert_eq!(c.values.data()[0], 80.0);
    let [a, b, c] = chronological_split(&s, &SplitSpec::Ratios([1.0, 0.0, 0.0])).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (100, 0, 0));
    assert!(chronological_split(&s, &SplitSpec::Ratios([0.5, 0.1, 0.1])).is_err());
}

#[test]
fn ett_preset_rows_from_calendar() {
    // 15-minute rows from 2016-07-01, the ETTm1 layout
    let t0 = parse_timestamp("2016-07-01 00:00:00").unwrap();
    let n = 69_680;
    let s = RawSeries {
        timestamps: Some((0..n).map(|i| t0 + 900.0 * i as f64).collect()),
        values: Tensor::zeros(&[n, 1]),
        names: vec!["x".into()],
    };
    // calendar oracle: rows strictly before t0 + k·30 days
    let rows_before = |days: f64| s.timestamps.as_ref().unwrap().iter().filter(|&&t| t < t0 + days * 86_400.0).count();
    let [a, b, c] = chronological_split(&s, &SplitSpec::EttPreset).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (34_560, 11_520, 11_520));
    assert_eq!(a.len(), rows_before(360.0));
    assert_eq!(a.len() + b.len(), rows_before(480.0));
    assert_eq!(a.len() + b.len() + c.len(), rows_before(600.0));

    let hourly = ramp(17_420, 1, 3600.0);
    let [a, b, c] = chronological_split(&hourly, &SplitSpec::EttPreset).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (8_640, 2_880, 2_880));
    assert!(chronological_split(&ramp(1000, 1, 3600.0), &SplitSpec::EttPreset).is_err());
}

#[test]
fn standardize_round_trip_and_moments() {
    let spec = SynthSpec {
        n: 300,
        v: 3,
        noise_std: 0.3,
        seed: 2,
        ..SynthSpec::default()
    };
    let s = synth_generate(&spec).unwrap();
    let w = make_windows(&s, 24, 8, 5, SplitTag::Train).unwrap();
    let z = w.standardize(STD_EPS);
    let stats = z.stats.as_ref().unwrap();
    for m in 0..z.len() {
        let (x, _, _) = z.batch(&[m]);
        let st = NormStats::from_rows(x.data(), 3, 0.0);
        for c in 0..3 {
            assert!(st.mean[c].abs() < 1e-12);
            assert!((st.std[c] - 1.0).abs() < 1e-12);
        }
    }
    let back = destandardize(&z.targets, stats).unwrap();
    for (a, b) in back.data().iter().zip(w.targets.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn constant_channel_floors_std() {
    let s = RawSeries {
        timestamps: None,
        values: Tensor::full(&[10, 1], 4.0),
        names: vec!["k".into()],
    };
    let z = make_windows(&s, 4, 2, 1, SplitTag::Train).unwrap().standardize(STD_EPS);
    assert!(z.inputs.data().iter().all(|&x| x == 0.0));
    assert!(z.stats.unwrap().iter().all(|st| st.std[0] == STD_EPS));
}

#[test]
fn stats_depend_only_on_lookback() {
    let s = ramp(20, 1, 1.0);
    let mut t = s.clone();
    t.values.data_mut()[9] = 1e6; // a target row of window 0
    let a = make_windows(&s, 5, 5, 1, SplitTag::Train).unwrap().standardize(STD_EPS);
    let b = make_windows(&t, 5, 5, 1, SplitTag::Train).unwrap().standardize(STD_EPS);
    assert_eq!(a.stats.unwrap()[0], b.stats.unwrap()[0]);
}

#[test]
fn irregular_resample_contract() {
    let s = ramp(10_000, 1, 60.0);
    assert_eq!(irregular_resample(&s, 1.0, 3).unwrap(), s);
    let k = irregular_resample(&s, 0.5, 3).unwrap();
    assert!((4500..=5500).contains(&k.len()), "{}", k.len());
    let ts = k.timestamps.as_ref().unwrap();
    assert!(ts.windows(2).all(|w| w[1] > w[0]));
    assert!(irregular_resample(&s, 0.0, 3).is_err());
    assert_eq!(irregular_resample(&s, 0.5, 3).unwrap(), k);
}

#[test]
fn irregular_windows_targets_follow_last_observation() {
    let s = ramp(200, 1, 10.0);
    let k = irregular_resample(&s, 0.6, 1).unwrap();
    let w = irregular_windows(&s, &k, 8, 4, 1, SplitTag::Train).unwrap();
    let d = w.deltas.as_ref().unwrap();
    for m in 0..w.len() {
        let (x, y, _) = w.batch(&[m]);
        assert_eq!(y.data()[0], x.data()[7] + 1.0);
        assert_eq!(y.data()[3], x.data()[7] + 4.0);
        for t in 1..8 {
            assert_eq!(d.get(&[m, t]), x.data()[t] - x.data()[t - 1]);
        }
    }
    let full = irregular_windows(&s, &s, 8, 4, 1, SplitTag::Train).unwrap();
    assert_eq!(full, make_windows(&s, 8, 4, 1, SplitTag::Train).unwrap());
}

#[test]
fn noise_injection_contract() {
    let s = synth_generate(&SynthSpec { n: 2000, ..SynthSpec::default() }).unwrap();
    let w = make_windows(&s, 48, 24, 1, SplitTag::Test).unwrap().standardize(STD_EPS);
    assert_eq!(inject_gaussian_noise(&w, 0.0, 1).unwrap(), w);
    let noisy = inject_gaussian_noise(&w, 0.3, 1).unwrap();
    assert_eq!(noisy.targets, w.targets);
    let diff = noisy.inputs.sub(&w.inputs).unwrap();
    assert!(diff.len() >= 100_000);
    let n = diff.len() as f64;
    let mean = diff.sum() / n;
    let sd = (diff.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    assert!((sd - 0.3).abs() < 0.01, "{sd}");
    assert_eq!(inject_gaussian_noise(&w, 0.3, 1).unwrap(), noisy);
}

#[test]
fn channel_stats_of_ramp() {
    let s = ramp(5, 1, 1.0);
    let st = s.channel_stats();
    assert_eq!(st.mean, vec![2.0]);
    assert!((st.std[0] - 2f64.sqrt()).abs() < 1e-15);
}
