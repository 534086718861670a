use approx::assert_abs_diff_eq;
use densmat::datasets::{split, Dataset, MinMaxScaler};
use densmat::density_ops::{estimate_density_matrix, factorize};
use densmat::dmkdc::DmkdcModel;
use densmat::dmkde::{DmkdeConfig, DmkdeModel};
use densmat::feature_maps::RffMap;
use densmat::qmc::{InputMap, OutputMap, QmcModel};
use densmat::qmr::{QmrConfig, QmrModel};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn matrix(rows: std::ops::Range<usize>, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    rows.prop_flat_map(move |n| {
        prop::collection::vec(-3.0f64..3.0, n * cols).prop_map(move |v| Array2::from_shape_vec((n, cols), v).unwrap())
    })
}

fn config(gamma: f64, rff_dim: usize, rank: usize, seed: u64) -> DmkdeConfig {
    DmkdeConfig {
        gamma,
        rff_dim,
        rank,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn estimated_density_matrix_is_a_state(x in matrix(1..40, 2), seed in 0u64..1000) {
        let rff = RffMap::new(2, 16, 1.5, seed).unwrap();
        let z = rff.apply_normalized_batch(x.view()).unwrap();
        let rho = estimate_density_matrix(z.view()).unwrap();
        assert_abs_diff_eq!(rho.trace(), 1.0, epsilon = 1e-12);
        prop_assert!(rho.is_psd(1e-10).unwrap());
        let e = rho.entries();
        for i in 0..16 {
            for j in 0..16 {
                prop_assert_eq!(e[[i, j]], e[[j, i]]);
            }
        }
        let f = factorize(&rho, 16).unwrap();
        assert_abs_diff_eq!(f.trace(), 1.0, epsilon = 1e-9);
        for zi in z.rows() {
            let p = f.born(zi).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-9).contains(&p));
        }
    }

    #[test]
    fn dmkde_is_exchangeable(x in matrix(2..30, 1), shift in 1usize..29, q in -4.0f64..4.0) {
        let cfg = config(2.0, 32, 8, 3);
        let a = DmkdeModel::fit_estimation(x.view(), &cfg).unwrap();
        let n = x.nrows();
        let order: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let xp = x.select(ndarray::Axis(0), &order);
        let b = DmkdeModel::fit_estimation(xp.view(), &cfg).unwrap();
        let query = Array2::from_elem((1, 1), q);
        let (da, db) = (a.density_batch(query.view()).unwrap()[0], b.density_batch(query.view()).unwrap()[0]);
        prop_assert!(da >= 0.0);
        assert_abs_diff_eq!(da, db, epsilon = 1e-10 * (1.0 + da));
    }

    #[test]
    fn dmkdc_posteriors_are_distributions(x in matrix(6..40, 2), q in matrix(1..10, 2)) {
        let labels: Vec<usize> = (0..x.nrows()).map(|i| i % 3).collect();
        let m = DmkdcModel::fit_estimation(x.view(), &labels, 3, &config(1.0, 16, 4, 5)).unwrap();
        let p = m.posterior_batch(q.view()).unwrap();
        for row in p.rows() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn minmax_scaling_inverts(x in matrix(2..30, 3)) {
        let scaler = MinMaxScaler::fit(x.view()).unwrap();
        let t = scaler.transform(x.view()).unwrap();
        prop_assert!(t.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        let back = scaler.inverse(t.view()).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn stratified_split_keeps_proportions(counts in prop::collection::vec(2usize..40, 2..5), seed in 0u64..1000) {
        let labels: Vec<f64> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c as f64, k)).collect();
        let n = labels.len();
        let features = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let data = Dataset::new(features, Some(labels), "generated").unwrap();
        let (train, test) = split(&data, 0.7, true, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), n);
        let train_labels = train.class_labels().unwrap();
        for (c, &k) in counts.iter().enumerate() {
            let got = train_labels.iter().filter(|&&l| l == c).count() as f64;
            prop_assert!((got - 0.7 * k as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn qmc_prediction_ignores_joint_scale(x in matrix(4..30, 2), q in matrix(1..8, 2), c in 0.05f64..1.0) {
        let y: Vec<f64> = (0..x.nrows()).map(|i| (i % 2) as f64).collect();
        let input = InputMap::rff(2, 8, 1.0, 7).unwrap();
        let m = QmcModel::fit_estimation(x.view(), &y, input, OutputMap::OneHot { classes: 2 }, Some(6)).unwrap();
        let scaled = QmcModel::from_parts(
            m.input_map().clone(),
            m.output_map().clone(),
            m.joint().scaled(c).unwrap(),
            m.trained_by(),
        )
        .unwrap();
        let (a, b) = (m.predict_batch(q.view()).unwrap(), scaled.predict_batch(q.view()).unwrap());
        for (u, v) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(*u, *v, epsilon = 1e-9);
        }
        for row in a.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn qmr_predictions_stay_in_target_range(x in matrix(5..30, 2), q in matrix(1..8, 2)) {
        let y: Vec<f64> = x.rows().into_iter().map(|r| r[0] + 2.0 * r[1]).collect();
        let cfg = QmrConfig { rff_dim: 16, rank: Some(8), ..QmrConfig::default() };
        let m = QmrModel::fit_estimation(x.view(), &y, &cfg).unwrap();
        let (lo, hi) = (m.scaler().min, m.scaler().max);
        for p in m.predict_batch(q.view()).unwrap() {
            prop_assert!(p.y_hat >= lo - 1e-9 && p.y_hat <= hi + 1e-9);
            prop_assert!(p.variance >= -1e-12);
            assert_abs_diff_eq!(p.distribution.sum(), 1.0, epsilon = 1e-9);
        }
    }
}

#[test]
fn models_round_trip_through_json() {
    let x = Array2::from_shape_fn((30, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();

    let dmkde = DmkdeModel::fit_estimation(x.view(), &config(1.0, 16, 4, 1)).unwrap();
    assert_eq!(DmkdeModel::from_json(&dmkde.to_json().unwrap()).unwrap(), dmkde);

    let dmkdc = DmkdcModel::fit_estimation(x.view(), &labels, 3, &config(1.0, 16, 4, 2)).unwrap();
    assert_eq!(DmkdcModel::from_json(&dmkdc.to_json().unwrap()).unwrap(), dmkdc);

    let qmc = QmcModel::fit_estimation(x.view(), &y, InputMap::rff(2, 8, 1.0, 3).unwrap(), OutputMap::OneHot { classes: 3 }, None)
        .unwrap();
    assert_eq!(QmcModel::from_json(&qmc.to_json().unwrap()).unwrap(), qmc);

    let qmr = QmrModel::fit_estimation(x.view(), &y, &QmrConfig::default()).unwrap();
    let back = QmrModel::from_json(&qmr.to_json().unwrap()).unwrap();
    let q = Array1::from(vec![0.3, -0.2]);
    assert_eq!(back.predict(q.view()).unwrap(), qmr.predict(q.view()).unwrap());
}
