use hpft::datagen::*;
use hpft::experiments::select_tau_star;
use hpft::numkernel::{dot, norm, Matrix, RngState};
use proptest::prelude::*;

fn dataset(seed: u64, k: usize, n: usize) -> ClassificationDataset {
    gen_gaussian_classes(5, k, n, 3.0, 1.0, &mut RngState::new(seed))
}

#[test]
fn class_means_are_orthogonal_at_the_requested_radius() {
    let g = GaussianClasses::new(8, 5, 4.0, &mut RngState::new(1));
    for i in 0..5 {
        assert!((norm(g.means.row(i)) - 4.0).abs() < 1e-12);
        for j in 0..i {
            assert!(dot(g.means.row(i), g.means.row(j)).abs() < 1e-9);
        }
    }
}

#[test]
fn noiseless_samples_sit_on_their_means() {
    let g = GaussianClasses::new(4, 3, 2.0, &mut RngState::new(2));
    let d = g.sample(5, 0.0, &mut RngState::new(3));
    for i in 0..d.len() {
        assert_eq!(d.x.row(i), g.means.row(d.labels[i]));
    }
    assert_eq!(d.class_counts(), vec![5, 5, 5]);
}

#[test]
fn stratified_split_is_a_partition() {
    let d = dataset(4, 3, 40);
    let (tr, va) = d.train_valid_split(0.25, &mut RngState::new(5));
    assert_eq!(tr.class_counts(), vec![30, 30, 30]);
    assert_eq!(va.class_counts(), vec![10, 10, 10]);
    assert_eq!(tr.split, Split::Train);
    assert_eq!(va.split, Split::Valid);
    let mut rows: Vec<Vec<u64>> = (0..tr.len())
        .map(|i| tr.x.row(i).iter().map(|v| v.to_bits()).collect())
        .chain((0..va.len()).map(|i| va.x.row(i).iter().map(|v| v.to_bits()).collect()))
        .collect();
    rows.sort();
    rows.dedup();
    assert_eq!(rows.len(), d.len());
}

#[test]
fn shift_rotates_the_leading_plane_then_scales() {
    let d = dataset(6, 4, 10);
    let spec = ShiftSpec {
        class_subset: vec![2, 0],
        rotation_angle: 0.7,
        scale: 2.0,
        per_class_count: None,
    };
    let s = apply_shift(&d, &spec, &mut RngState::new(0)).unwrap();
    assert_eq!(s.num_classes, 2);
    assert_eq!(s.class_counts(), vec![10, 10]);
    let src: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == 2).collect();
    for (r, &i) in src.iter().enumerate() {
        let a = d.x.row(i);
        let b = s.x.row(r);
        assert!((norm(&b[..2]) - 2.0 * norm(&a[..2])).abs() < 1e-12);
        assert!((dot(&b[..2], &a[..2]) / (norm(&b[..2]) * norm(&a[..2])) - 0.7f64.cos()).abs() < 1e-12);
        for j in 2..a.len() {
            assert_eq!(b[j], 2.0 * a[j]);
        }
    }
}

#[test]
fn shift_rejects_bad_specs() {
    let d = dataset(6, 3, 4);
    let mut spec = ShiftSpec::identity(3);
    spec.class_subset = vec![0, 3];
    assert!(apply_shift(&d, &spec, &mut RngState::new(0)).is_err());
    let mut spec = ShiftSpec::identity(3);
    spec.scale = 0.0;
    assert!(apply_shift(&d, &spec, &mut RngState::new(0)).is_err());
    let mut spec = ShiftSpec::identity(3);
    spec.per_class_count = Some(5);
    assert!(matches!(
        apply_shift(&d, &spec, &mut RngState::new(0)),
        Err(hpft::Error::NotEnoughSamples { requested: 5, available: 4, .. })
    ));
}

#[test]
fn overparameterized_regression_has_full_row_rank() {
    for seed in 0..20 {
        let r = gen_overparam_regression(12, 8, &mut RngState::new(seed)).unwrap();
        assert_eq!(numerical_rank(&r.x.matmul_nt(&r.x)), 8);
        assert_eq!(r.y.len(), 8);
    }
}

#[test]
fn csv_round_trip_keeps_nine_significant_digits() {
    let d = dataset(8, 3, 7);
    let mut buf = Vec::new();
    d.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x0,x1,x2,x3,x4,label");
    let back = ClassificationDataset::read_csv(&buf[..], Some(3), Split::Train).unwrap();
    assert_eq!(back.labels, d.labels);
    for (a, b) in back.x.as_slice().iter().zip(d.x.as_slice()) {
        assert!((a - b).abs() <= 5e-9 * b.abs());
    }
    // a second round trip is exact
    let mut again = Vec::new();
    back.write_csv(&mut again).unwrap();
    assert_eq!(again, buf);
}

#[test]
fn csv_reader_rejects_malformed_input() {
    let bad_label = "x0,label\n1.0,0.5\n";
    assert!(ClassificationDataset::read_csv(bad_label.as_bytes(), None, Split::Train).is_err());
    let ragged = "x0,x1,label\n1.0,0\n";
    assert!(ClassificationDataset::read_csv(ragged.as_bytes(), None, Split::Train).is_err());
    let too_many = "x0,label\n1.0,4\n";
    assert!(ClassificationDataset::read_csv(too_many.as_bytes(), Some(3), Split::Train).is_err());
}

#[test]
fn regression_csv_round_trip() {
    let r = gen_overparam_regression(5, 3, &mut RngState::new(1)).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let back = RegressionDataset::read_csv(&buf[..]).unwrap();
    assert_eq!(back.x.shape(), (3, 5));
    for (a, b) in back.y.iter().zip(&r.y) {
        assert!((a - b).abs() <= 5e-9 * b.abs());
    }
}

#[test]
fn forked_streams_are_reproducible_and_distinct() {
    let root = RngState::new(42);
    let a: Vec<f64> = { let mut r = root.fork_named("a"); (0..5).map(|_| r.normal()).collect() };
    let a2: Vec<f64> = { let mut r = RngState::new(42).fork_named("a"); (0..5).map(|_| r.normal()).collect() };
    let b: Vec<f64> = { let mut r = root.fork_named("b"); (0..5).map(|_| r.normal()).collect() };
    assert_eq!(a, a2);
    assert_ne!(a, b);
    let mut p = RngState::new(3).permutation(50);
    p.sort_unstable();
    assert_eq!(p, (0..50).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn smoothed_label_rows_sum_to_one(seed in 0u64..10_000, k in 2usize..8, eta in 0.01f64..=1.0) {
        let mut rng = RngState::new(seed);
        let labels: Vec<usize> = (0..6).map(|_| rng.below(k)).collect();
        let d = ClassificationDataset::new(Matrix::zeros(6, 1), labels.clone(), k, Split::Train);
        let t = smooth_labels(&d.onehot(), eta);
        for (i, &y) in labels.iter().enumerate() {
            let row = t.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row[y] - (eta + (1.0 - eta) / k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn format_float_keeps_nine_significant_digits(v in prop::num::f64::NORMAL) {
        let s = format_float(v);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - v).abs() <= 5e-9 * v.abs(), "{v} -> {s}");
        let digits = s.split(['e', 'E']).next().unwrap().chars().filter(|c| c.is_ascii_digit()).collect::<String>();
        prop_assert!(digits.trim_start_matches('0').len() <= 9, "{s}");
    }

    #[test]
    fn tau_star_ignores_grid_order(vals in prop::collection::vec((0usize..64, 0u8..5), 1..12), seed in 0u64..1000) {
        let mut rows: Vec<(usize, f64)> = vals.iter().map(|&(t, v)| (t, v as f64 / 4.0)).collect();
        rows.sort_by_key(|r| r.0);
        rows.dedup_by_key(|r| r.0);
        let a = select_tau_star(&rows);
        let mut shuffled = rows.clone();
        RngState::new(seed).shuffle(&mut shuffled);
        prop_assert_eq!(a.clone(), select_tau_star(&shuffled));
        let (star, ties) = a.unwrap();
        let best = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(rows.iter().all(|&(t, v)| v < best || t >= star));
        prop_assert!(ties.iter().all(|t| *t > star));
    }
}
