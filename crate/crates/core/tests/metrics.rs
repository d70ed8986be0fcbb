mod common;

use common::{brute_force_auc, build, rng, tiny_config};
use forgeloc::data::dataset::{generate, partition, DatasetSpec};
use forgeloc::metrics::{evaluate, f1_from_counts, pixel_auc, standard_suite};
use rand::RngExt;

#[test]
fn auc_matches_all_pairs_oracle() {
    let mut r = rng(21);
    let mut checked = 0;
    for trial in 0..1000 {
        let n = r.random_range(2..=64);
        // every other raster is quantised so that ties are common
        let levels = if trial % 2 == 0 { 0 } else { r.random_range(2..6) };
        let pred: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = r.random();
                if levels > 0 {
                    (v * levels as f64).floor() / levels as f64
                } else {
                    v
                }
            })
            .collect();
        let gt: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let got = pixel_auc(&pred, &gt).unwrap();
        let want = brute_force_auc(&pred, &gt);
        match (got, want) {
            (Some(a), Some(b)) => {
                assert!((a - b).abs() <= 1e-12, "trial {trial}: {a} vs {b}");
                checked += 1;
            }
            (None, None) => {}
            other => panic!("trial {trial}: definedness differs: {other:?}"),
        }
    }
    assert!(checked > 900);
}

#[test]
fn auc_hand_case() {
    let auc = pixel_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true])
        .unwrap()
        .unwrap();
    assert_eq!(auc, 0.75);
}

#[test]
fn auc_is_a_rank_statistic() {
    let mut r = rng(22);
    for _ in 0..100 {
        let pred: Vec<f64> = (0..40).map(|_| r.random()).collect();
        let gt: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let a = pixel_auc(&pred, &gt).unwrap().unwrap();
        let cubed: Vec<f64> = pred.iter().map(|p| p.powi(3) * 5.0 - 2.0).collect();
        assert!((pixel_auc(&cubed, &gt).unwrap().unwrap() - a).abs() <= 1e-12);
        let flipped: Vec<f64> = pred.iter().map(|p| 1.0 - p).collect();
        assert!((pixel_auc(&flipped, &gt).unwrap().unwrap() + a - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn f1_grows_with_true_positives() {
    for fp in 0..6 {
        for fn_ in 0..6 {
            for tp in 0..10 {
                assert!(f1_from_counts(tp + 1, fp, fn_) >= f1_from_counts(tp, fp, fn_));
            }
        }
    }
    assert!((f1_from_counts(2, 1, 1) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn random_weights_score_near_chance() {
    let (model, store) = build(tiny_config(32), 23);
    let spec = DatasetSpec::new(32, 32, 0, 200, 24);
    let (_, test) = partition(generate(&spec).unwrap());
    let report = evaluate(&model, &store, &test, &[], 25).unwrap();
    let auc = report.clean().auc;
    assert_eq!(report.images, 200);
    assert!((0.35..=0.65).contains(&auc), "clean AUC {auc}");
}

#[test]
fn report_has_clean_row_then_one_per_perturbation() {
    let (model, store) = build(tiny_config(32), 26);
    let spec = DatasetSpec::new(32, 32, 0, 4, 27);
    let (_, test) = partition(generate(&spec).unwrap());
    let suite = standard_suite();
    let report = evaluate(&model, &store, &test, &suite, 28).unwrap();
    assert_eq!(report.rows.len(), suite.len() + 1);
    assert_eq!(report.rows[0].name, "clean");
    for (row, p) in report.rows[1..].iter().zip(&suite) {
        assert_eq!(row.name, p.to_string());
        assert!((row.delta_auc - (row.auc - report.clean().auc)).abs() < 1e-12);
    }
    assert!(report
        .rows
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.auc) && (0.0..=1.0).contains(&r.f1)));
    let text = report.to_string();
    assert!(text.starts_with("# pixel metrics, mean over 4 images (per-image aggregation); F1 threshold 0.5"));
    assert_eq!(text.lines().count(), 2 + suite.len() + 1);
}
