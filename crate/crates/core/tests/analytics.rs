mod common;

use common::{random_tensor, rng};
use dmd_core::analytics::{
    accuracy, attention_drift, frechet, param_diff, retention_eval, sqrt_psd, stats_of_rows, IntervalStats,
    LabeledBatch, SnapshotKind,
};
use dmd_core::gan::{DataShape, Discriminator, NetworkSpec};
use dmd_core::nn::{LayerKind, LayerParams};
use dmd_core::Tensor;
use nalgebra::DMatrix;
use rand::Rng;

fn stats(mean: Vec<f64>, cov: Vec<f64>) -> IntervalStats {
    IntervalStats {
        interval: (0, 1),
        mean,
        cov,
        count: 100,
        ridge: 0.0,
    }
}

fn random_psd(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose()
}

/// Closed-form square root of a 2×2 PSD matrix.
fn sqrt_2x2(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = m.determinant().max(0.0).sqrt();
    let t = (m.trace() + 2.0 * s).sqrt();
    (m + DMatrix::identity(2, 2) * s) / t
}

#[test]
fn closed_form_distances() {
    let eye = vec![1.0, 0.0, 0.0, 1.0];
    let a = stats(vec![0.0, 0.0], eye.clone());
    assert_eq!(frechet(&a, &a).unwrap(), 0.0);
    let shifted = stats(vec![1.0, 0.0], eye.clone());
    assert!((frechet(&a, &shifted).unwrap() - 1.0).abs() < 1e-8);
    let wide = stats(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 4.0]);
    assert!((frechet(&wide, &a).unwrap() - 2.0).abs() < 1e-8);
}

#[test]
fn one_dimensional_distance_is_moment_gap() {
    let mut r = rng(8);
    for _ in 0..20 {
        let (m1, m2) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let (s1, s2): (f64, f64) = (r.random_range(0.1..2.0), r.random_range(0.1..2.0));
        let d = frechet(&stats(vec![m1], vec![s1 * s1]), &stats(vec![m2], vec![s2 * s2])).unwrap();
        let want = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        assert!((d - want).abs() < 1e-10, "{d} vs {want}");
    }
}

#[test]
fn two_dimensional_distance_matches_closed_form_roots() {
    let mut r = rng(9);
    for _ in 0..20 {
        let sa = random_psd(2, &mut r);
        let sb = random_psd(2, &mut r);
        let ra = sqrt_2x2(&sa);
        let cross = sqrt_2x2(&(&ra * &sb * &ra));
        let want = sa.trace() + sb.trace() - 2.0 * cross.trace();
        let a = stats(vec![0.0, 0.0], sa.transpose().as_slice().to_vec());
        let b = stats(vec![0.0, 0.0], sb.transpose().as_slice().to_vec());
        let got = frechet(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-8 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn distance_is_symmetric() {
    let mut r = rng(10);
    for dim in [2, 5, 16] {
        let a = stats((0..dim).map(|_| r.random()).collect(), random_psd(dim, &mut r).as_slice().to_vec());
        let b = stats((0..dim).map(|_| r.random()).collect(), random_psd(dim, &mut r).as_slice().to_vec());
        let (ab, ba) = (frechet(&a, &b).unwrap(), frechet(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
    }
}

#[test]
fn square_roots_reconstruct() {
    let mut r = rng(11);
    for i in 0..50 {
        let dim = 1 + i % 16;
        let m = random_psd(dim, &mut r);
        let s = sqrt_psd(&m).unwrap();
        let err = (&s * &s - &m).norm() / m.norm().max(1e-300);
        assert!(err < 1e-8, "dim {dim}: {err}");
    }
}

#[test]
fn clearly_negative_eigenvalues_are_rejected() {
    let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
    assert!(sqrt_psd(&m).is_err());
}

#[test]
fn sample_moments_use_unbiased_covariance() {
    let rows = vec![vec![0.0, 0.0], vec![2.0, 2.0]];
    let s = stats_of_rows(&rows, (0, 1)).unwrap();
    assert_eq!(s.mean, vec![1.0, 1.0]);
    assert_eq!(s.cov, vec![2.0, 2.0, 2.0, 2.0]);
    assert!(s.ridge > 0.0);
    // Identical summaries stay exactly zero even with a ridge.
    assert_eq!(frechet(&s, &s).unwrap(), 0.0);
}

#[test]
fn parameter_difference_is_squared_weight_delta() {
    let kind = LayerKind::Dense { fan_in: 2, fan_out: 1 };
    let w0 = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let w1 = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
    let b = Tensor::zeros(&[1]);
    let prev = LayerParams::new(kind, w0, b.clone(), 1).unwrap();
    let curr = LayerParams::new(kind, w1, Tensor::ones(&[1]), 1).unwrap();
    assert_eq!(param_diff(&prev, &prev, 0).unwrap().value, 0.0);
    assert_eq!(param_diff(&prev, &curr, 1).unwrap().value, 25.0);
}

#[test]
fn attention_drift_is_one_for_an_unchanged_snapshot() {
    let d = Discriminator::new(&NetworkSpec::default(), DataShape::Vector(2), 1, 2).unwrap();
    let probe = random_tensor(&[8, 2], &mut rng(12));
    assert!((attention_drift(&d, &d, &probe, 5).unwrap() - 1.0).abs() < 1e-12);
    assert!(attention_drift(&d, &d, &probe, 42).is_err());
}

#[test]
fn accuracy_thresholds_at_one_half() {
    assert_eq!(accuracy(&[0.9, 0.5, 0.2, 0.51], &[1, 1, 0, 0]), 0.5);
}

#[test]
fn retention_table_has_one_row_per_batch() {
    let d = Discriminator::new(&NetworkSpec::default(), DataShape::Vector(2), 1, 3).unwrap();
    let mut r = rng(13);
    let batches: Vec<LabeledBatch> = [10, 30, 40, 50]
        .iter()
        .map(|&s| LabeledBatch::balanced(s, &random_tensor(&[8, 2], &mut r), &random_tensor(&[8, 2], &mut r)).unwrap())
        .collect();
    let t = retention_eval(&d, 40, &batches).unwrap();
    assert_eq!(t.rows.len(), 4);
    assert!(t.accuracy(SnapshotKind::Future).is_some());
    assert!(t.rows.iter().all(|row| (0.0..=1.0).contains(&row.accuracy)));
}
