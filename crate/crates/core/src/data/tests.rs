use super::*;
use proptest::prelude::*;

fn dataset(n: usize, t: usize, f: impl Fn(usize, usize) -> f32) -> TrafficDataset {
    let series = Tensor::from_fn(&[n, t], |i| f(i / t, i % t));
    TrafficDataset::new(series, DEFAULT_START_EPOCH, 15).unwrap()
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn binary_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.hstd");
    let ds = dataset(3, 7, |n, t| (n as f32 + 0.1) * (t as f32 - 2.7).powi(3));
    ds.write(&p).unwrap();
    let back = ingest(&p, 1).unwrap();
    assert_eq!(back.series.shape(), &[3, 7]);
    for (a, b) in ds.series.data().iter().zip(back.series.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(back.start_epoch, ds.start_epoch);
    assert_eq!(back.interval_minutes, 15);
}

#[test]
fn binary_is_time_major() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.hstd");
    dataset(2, 2, |n, t| (10 * n + t) as f32).write(&p).unwrap();
    let bytes = fs::read(&p).unwrap();
    let vals: Vec<f32> = bytes[HSTD_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(vals, vec![0.0, 10.0, 1.0, 11.0]);
}

#[test]
fn aggregation_averages_consecutive_steps() {
    let series = Tensor::new(&[1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
    let ds = TrafficDataset::new(series, 0, 5).unwrap();
    let agg = ds.aggregate(3).unwrap();
    assert_eq!(agg.series.data(), &[2.0]);
    assert_eq!(agg.interval_minutes, 15);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.hstd");
    ds.write(&p).unwrap();
    assert_eq!(ingest(&p, 3).unwrap().series.data(), &[2.0]);
}

#[test]
fn truncated_file_reports_byte_counts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.hstd");
    dataset(2, 3, |_, t| t as f32).write(&p).unwrap();
    let mut bytes = fs::read(&p).unwrap();
    let full = bytes.len();
    bytes.truncate(full - 3);
    fs::write(&p, &bytes).unwrap();
    let err = ingest(&p, 1).unwrap_err();
    match &err {
        Error::Truncated { expected, actual, .. } => {
            assert_eq!(*expected as usize, full);
            assert_eq!(*actual as usize, full - 3);
        }
        other => panic!("unexpected {other:?}"),
    }
    let msg = err.to_string();
    assert!(msg.contains(&full.to_string()) && msg.contains(&(full - 3).to_string()), "{msg}");

    bytes.truncate(10);
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(ingest(&p, 1), Err(Error::Truncated { .. })));
}

#[test]
fn bad_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.hstd");
    fs::write(&p, b"HSTD2aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa").unwrap();
    let err = ingest(&p, 1).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("magic"));
}

#[test]
fn csv_ingest_and_timestamp_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    fs::write(
        &p,
        "timestamp,node_0,node_1\n2024-01-01 00:00:00,1,10\n2024-01-01 00:05:00,2,20\n2024-01-01 00:10:00,3,30\n",
    )
    .unwrap();
    let ds = ingest(&p, 1).unwrap();
    assert_eq!(ds.series.data(), &[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]);
    assert_eq!(ds.start_epoch, DEFAULT_START_EPOCH);
    assert_eq!(ds.interval_minutes, 5);
    assert_eq!(ingest(&p, 3).unwrap().series.data(), &[2.0, 20.0]);

    fs::write(&p, "timestamp,node_0\n1704067200,1\n1704067800,2\n1704068100,3\n").unwrap();
    assert!(matches!(ingest(&p, 1), Err(Error::Data(_))));
    fs::write(&p, "timestamp,node_0\n1704067800,1\n1704067200,2\n").unwrap();
    let err = ingest(&p, 1).unwrap_err();
    assert!(err.to_string().contains("not increasing"), "{err}");
}

#[test]
fn constant_series_normalizes_to_zero_and_recovers() {
    let ds = dataset(2, 20, |_, _| 7.25);
    let s = split_and_normalize(&ds, &SplitConfig::default()).unwrap();
    assert!(s.normalized.data().iter().all(|&v| v == 0.0));
    assert_eq!(s.norm.std[0], STD_FLOOR);
    assert_eq!(s.norm.denormalize(1, 0.0), 7.25);
}

#[test]
fn train_statistics_match_hand_arithmetic() {
    // 10 values; train = first 6: 2, 4, 4, 4, 5, 5 -> mean 4, population std 1.
    let vals = [2.0f32, 4.0, 4.0, 4.0, 5.0, 5.0, 100.0, -100.0, 50.0, 0.0];
    let ds = dataset(1, 10, |_, t| vals[t]);
    let s = split_and_normalize(&ds, &SplitConfig::default()).unwrap();
    assert_eq!(s.train, vec![0..6]);
    assert_eq!(s.val, vec![6..8]);
    assert_eq!(s.test, vec![8..10]);
    assert!((s.norm.mean[0] - 4.0).abs() < 1e-12);
    assert!((s.norm.std[0] - 1.0).abs() < 1e-12);
    assert_eq!(s.normalized.data()[6], 96.0);
}

#[test]
fn global_and_per_node_statistics() {
    let ds = dataset(2, 10, |n, t| if n == 0 { t as f32 } else { 100.0 });
    let global = split_and_normalize(&ds, &SplitConfig::default()).unwrap();
    assert_eq!(global.norm.mean[0], global.norm.mean[1]);
    let cfg = SplitConfig {
        per_node: true,
        ..SplitConfig::default()
    };
    let per = split_and_normalize(&ds, &cfg).unwrap();
    assert!((per.norm.mean[0] - 2.5).abs() < 1e-12);
    assert_eq!(per.norm.mean[1], 100.0);
    assert_eq!(per.norm.std[1], STD_FLOOR);
}

#[test]
fn empty_split_is_an_error() {
    let ds = dataset(1, 10, |_, t| t as f32);
    let cfg = SplitConfig {
        ratios: [1.0, 0.0, 0.0],
        ..SplitConfig::default()
    };
    let err = split_and_normalize(&ds, &cfg).unwrap_err();
    assert!(err.to_string().contains("validation"), "{err}");
    let cfg = SplitConfig {
        ratios: [0.5, 0.2, 0.2],
        ..SplitConfig::default()
    };
    assert!(matches!(split_and_normalize(&ds, &cfg), Err(Error::Config(_))));
}

#[test]
fn seasonal_split_pools_quarters() {
    let ds = dataset(1, 40, |_, t| t as f32);
    let cfg = SplitConfig {
        seasonal: true,
        ..SplitConfig::default()
    };
    let s = split_and_normalize(&ds, &cfg).unwrap();
    assert_eq!(s.train, vec![0..6, 10..16, 20..26, 30..36]);
    assert_eq!(s.val, vec![6..8, 16..18, 26..28, 36..38]);
    assert_eq!(s.test, vec![8..10, 18..20, 28..30, 38..40]);
    let train_mean = [0, 10, 20, 30].iter().map(|q| (0..6).map(|i| (q + i) as f64).sum::<f64>()).sum::<f64>() / 24.0;
    assert!((s.norm.mean[0] - train_mean).abs() < 1e-12);
}

#[test]
fn window_counts_and_offsets() {
    assert_eq!(window_starts(&(0..25), 12, 12, 1).unwrap(), vec![0, 1]);
    assert_eq!(window_starts(&(0..26), 12, 12, 2).unwrap(), vec![0, 2]);
    assert_eq!(window_starts(&(5..30), 12, 12, 1).unwrap(), vec![5, 6]);
    assert!(matches!(window_starts(&(0..23), 12, 12, 1), Err(Error::Data(_))));
    assert!(window_starts(&(0..30), 12, 12, 0).is_err());
}

#[test]
fn target_equals_later_input_tail() {
    let ds = dataset(3, 60, |n, t| (n * 1000 + t) as f32 * 0.5);
    let s = split_and_normalize(&ds, &SplitConfig::default()).unwrap();
    let (t, tp) = (4, 4);
    let b = s.batch(&[0, t], t, tp);
    // y of sample 0, in data units, equals x of sample at offset T once de-normalised.
    for node in 0..3 {
        for j in 0..tp {
            let y = b.y.get(&[0, node, j]) as f64;
            let x = s.norm.denormalize(node, b.x.get(&[1, node, j]) as f64);
            assert!((y - x).abs() < 1e-3, "{y} vs {x}");
            assert_eq!(y, ds.series.get(&[node, t + j]) as f64);
        }
    }
    assert_eq!(b.times.len(), 2 * t);
    assert_eq!(b.times[t], s.step_time(t));
}

#[test]
fn windows_stay_inside_their_split() {
    let ds = dataset(1, 100, |_, t| t as f32);
    let s = split_and_normalize(&ds, &SplitConfig::default()).unwrap();
    for role in [Role::Train, Role::Val, Role::Test] {
        let ranges = s.ranges(role).to_vec();
        for st in s.windows(role, 5, 3, 1).unwrap() {
            assert!(ranges.iter().any(|r| r.start <= st && st + 8 <= r.end));
        }
    }
    assert_eq!(s.windows(Role::Train, 5, 3, 1).unwrap().len(), 60 - 8 + 1);
    assert!(s.windows(Role::Val, 12, 12, 1).is_err());
}

#[test]
fn baselines_on_known_series() {
    // Period of one day at 15-minute steps: the historical average is exact.
    let ds = dataset(2, 96 * 10, |n, t| (n * 10 + t % 96) as f32);
    let s = split_and_normalize(&ds, &SplitConfig::default()).unwrap();
    let starts = s.windows(Role::Test, 12, 12, 7).unwrap();
    let b = s.batch(&starts, 12, 12);
    let ha = s.historical_average(&starts, 12, 12);
    assert_eq!(ha.data(), b.y.data());
    let lv = s.last_value(&starts, 12, 12);
    assert_eq!(lv.get(&[0, 1, 5]), ds.series.get(&[1, starts[0] + 11]));
}

#[test]
fn synth_noiseless_single_region_is_uniform() {
    let mut cfg = SynthConfig::new(5, 300, 1, 3);
    cfg.sigma = 0.0;
    let s = synth(&cfg).unwrap();
    let d = s.dataset.series.data();
    for node in 1..5 {
        assert_eq!(&d[..300], &d[node * 300..(node + 1) * 300]);
    }
    assert!(s.regions.iter().all(|&r| r == 0));
}

#[test]
fn synth_is_deterministic_and_positive() {
    let cfg = SynthConfig::new(12, 500, 3, 11);
    let a = synth(&cfg).unwrap();
    let b = synth(&cfg).unwrap();
    assert_eq!(a.dataset.series, b.dataset.series);
    assert_eq!(a.regions, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    assert!(a.dataset.series.data().iter().all(|&v| v > 0.0));
    let c = synth(&SynthConfig::new(12, 500, 3, 12)).unwrap();
    assert_ne!(a.dataset.series, c.dataset.series);
    assert!(synth(&SynthConfig::new(3, 10, 4, 0)).is_err());
}

#[test]
fn synth_regions_are_more_correlated_inside() {
    let mut cfg = SynthConfig::new(16, 96 * 14, 4, 5);
    cfg.sigma = 0.3;
    let s = synth(&cfg).unwrap();
    let t = cfg.steps;
    let d = s.dataset.series.data();
    let row = |i: usize| &d[i * t..(i + 1) * t];
    let (mut within, mut cross) = (Vec::new(), Vec::new());
    for i in 0..16 {
        for j in i + 1..16 {
            let c = pearson(row(i), row(j));
            if s.regions[i] == s.regions[j] { within.push(c) } else { cross.push(c) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&within) - mean(&cross);
    assert!(gap > 0.2, "within {} cross {}", mean(&within), mean(&cross));
}

#[test]
fn synth_autocorrelation_peaks_at_one_day() {
    for seed in 0..4 {
        let mut cfg = SynthConfig::new(6, 96 * 14, 3, seed);
        cfg.sigma = 0.0;
        let s = synth(&cfg).unwrap();
        let t = cfg.steps;
        let day = 96;
        for node in 0..6 {
            let row = &s.dataset.series.data()[node * t..(node + 1) * t];
            let best = (1..=2 * day)
                .max_by(|&a, &b| {
                    let ca = pearson(&row[..t - a], &row[a..]);
                    let cb = pearson(&row[..t - b], &row[b..]);
                    ca.total_cmp(&cb)
                })
                .unwrap();
            assert!(best.abs_diff(day) <= 1, "seed {seed} node {node}: peak at lag {best}");
        }
    }
}

#[test]
fn sidecars_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(&SynthConfig::new(4, 50, 2, 0)).unwrap();
    let p = dir.path().join("regions.csv");
    write_region_labels(&p, &s.regions).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), "node_id,region_id\n0,0\n1,0\n2,1\n3,1\n");
    let a = dir.path().join("adj.csv");
    write_adjacency(&a, s.dataset.adjacency.as_ref().unwrap()).unwrap();
    assert_eq!(fs::read_to_string(&a).unwrap(), "0,1,1\n2,3,1\n0,2,1\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn denormalize_inverts_normalize(
        vals in proptest::collection::vec(-1e3f32..1e3, 10..40),
        per_node in any::<bool>(),
    ) {
        let t = vals.len() / 2;
        let ds = dataset(2, t, |n, s| vals[n * t + s]);
        let cfg = SplitConfig { per_node, ..SplitConfig::default() };
        let s = split_and_normalize(&ds, &cfg).unwrap();
        for node in 0..2 {
            for step in 0..t {
                let x = ds.series.get(&[node, step]) as f64;
                let back = s.norm.denormalize(node, s.norm.normalize(node, x));
                prop_assert!((back - x).abs() <= 1e-5 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn windows_never_cross_boundaries(
        len in 30usize..200,
        t in 1usize..10,
        tp in 1usize..10,
        stride in 1usize..5,
        seasonal in any::<bool>(),
    ) {
        let ds = dataset(1, len, |_, s| s as f32);
        let cfg = SplitConfig { seasonal, ..SplitConfig::default() };
        let Ok(s) = split_and_normalize(&ds, &cfg) else { return Ok(()) };
        for role in [Role::Train, Role::Val, Role::Test] {
            if let Ok(starts) = s.windows(role, t, tp, stride) {
                for st in starts {
                    prop_assert!(s.ranges(role).iter().any(|r| r.start <= st && st + t + tp <= r.end));
                }
            }
        }
    }
}
