mod common;

use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use spatial_contrast::sc_loss::*;
use spatial_contrast::tensor::Tensor;

fn batch(rows1: &[Vec<f64>], rows2: &[Vec<f64>]) -> FeatureBatch<f64> {
    FeatureBatch::from_rows(rows1, rows2).unwrap()
}

/// `ln(1 + x)` for `0 <= x <= 1` via the `atanh` series, summed until the
/// terms underflow.
fn series_ln1p(x: f64) -> f64 {
    let z = x / (2.0 + x);
    let (mut term, mut sum, mut k) = (z, 0.0, 1.0);
    while term.abs() > 1e-300 && k < 400.0 {
        sum += term / k;
        term *= z * z;
        k += 2.0;
    }
    2.0 * sum
}

fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..=6, 1usize..=8).prop_flat_map(|(n, d)| {
        let row = || prop::collection::vec(-2.0f64..2.0, d);
        (
            prop::collection::vec(row(), n),
            prop::collection::vec(row(), n),
        )
    })
}

#[test]
fn pair_loss_closed_form() {
    let got = sc_pair_loss(&[0.0], &[0.0], &[1.0]).unwrap();
    let want = series_ln1p((-1.0f64).exp());
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    let two_d = sc_pair_loss(&[0.0, 0.0], &[0.6, 0.8], &[3.0, 4.0]).unwrap();
    let want = series_ln1p((1.0f64 - 5.0).exp());
    assert!((two_d - want).abs() < 1e-9);
}

#[test]
fn single_image_loss_is_zero() {
    let out = sc_batch_loss(&batch(&[vec![0.3, -1.0]], &[vec![2.0, 5.0]])).unwrap();
    assert_eq!(out.loss, 0.0);
}

#[test]
fn identical_features_give_log_n() {
    for n in 1..12 {
        let rows = vec![vec![0.25, -0.5, 1.0]; n];
        let out = sc_batch_loss(&batch(&rows, &rows)).unwrap();
        assert!((out.loss - (n as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn batch_loss_matches_term_by_term_oracle() {
    let mut runner = TestRunner::new(Config::with_cases(100));
    runner
        .run(&batch_strategy(), |(f1, f2)| {
            let out = sc_batch_loss(&batch(&f1, &f2)).unwrap();
            prop_assert!((out.loss - naive_sc_loss(&f1, &f2)).abs() < 1e-10);
            for i in 0..f1.len() {
                for j in 0..f1.len() {
                    prop_assert!(
                        (out.distance_matrix.row(i)[j] - l2(&f1[i], &f2[j])).abs() < 1e-12
                    );
                }
            }
            Ok(())
        })
        .unwrap();
}

proptest! {
    #![proptest_config(Config::with_cases(100))]

    #[test]
    fn permutation_invariance((f1, f2) in batch_strategy(), shift in 0usize..6) {
        let n = f1.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + shift) % n).collect();
        let mut seen = perm.clone();
        seen.sort();
        seen.dedup();
        prop_assume!(seen.len() == n);
        let p1: Vec<_> = perm.iter().map(|&i| f1[i].clone()).collect();
        let p2: Vec<_> = perm.iter().map(|&i| f2[i].clone()).collect();
        let a = sc_batch_loss(&batch(&f1, &f2)).unwrap();
        let b = sc_batch_loss(&batch(&p1, &p2)).unwrap();
        prop_assert!((a.loss - b.loss).abs() < 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(b.grad_f1.row(k).len(), a.grad_f1.row(i).len());
            for (x, y) in b.grad_f1.row(k).iter().zip(a.grad_f1.row(i)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translation_invariance((f1, f2) in batch_strategy(), t in prop::collection::vec(-50.0f64..50.0, 8)) {
        let d = f1[0].len();
        let move_rows = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|r| r.iter().zip(&t[..d]).map(|(x, s)| x + s).collect()).collect()
        };
        let a = sc_batch_loss(&batch(&f1, &f2)).unwrap();
        let b = sc_batch_loss(&batch(&move_rows(&f1), &move_rows(&f2))).unwrap();
        prop_assert!((a.loss - b.loss).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences((f1, f2) in batch_strategy()) {
        let n = f1.len();
        let d = f1[0].len();
        let out = sc_batch_loss(&batch(&f1, &f2)).unwrap();
        let mut flat: Vec<f64> = f1.concat();
        flat.extend(f2.concat());
        let loss_of = |v: &[f64]| {
            let a: Vec<Vec<f64>> = v[..n * d].chunks(d).map(<[f64]>::to_vec).collect();
            let b: Vec<Vec<f64>> = v[n * d..].chunks(d).map(<[f64]>::to_vec).collect();
            naive_sc_loss(&a, &b)
        };
        let numeric = numeric_grad(loss_of, &flat, 1e-6);
        let mut analytic = out.grad_f1.data().to_vec();
        analytic.extend_from_slice(out.grad_f2.data());
        let err = max_rel_err(&analytic, &numeric);
        prop_assert!(err < 1e-5, "relative error {}", err);
    }

    #[test]
    fn gradients_sum_to_zero_under_translation((f1, f2) in batch_strategy()) {
        let out = sc_batch_loss(&batch(&f1, &f2)).unwrap();
        let d = f1[0].len();
        for k in 0..d {
            let s: f64 = out.grad_f1.data().iter().skip(k).step_by(d).sum::<f64>()
                + out.grad_f2.data().iter().skip(k).step_by(d).sum::<f64>();
            prop_assert!(s.abs() < 1e-12);
        }
    }
}

#[test]
fn well_separated_images_approach_zero_loss() {
    let n = 4;
    let f1: Vec<Vec<f64>> = (0..n).map(|i| vec![1e4 * i as f64, 0.0]).collect();
    let f2: Vec<Vec<f64>> = (0..n).map(|i| vec![1e4 * i as f64, 1e-3]).collect();
    let out = sc_batch_loss(&batch(&f1, &f2)).unwrap();
    assert!(out.loss < 1e-2, "{}", out.loss);
}

#[test]
fn mismatched_and_non_finite_inputs_are_rejected() {
    let a = Tensor::<f64>::zeros(vec![3, 4]).unwrap();
    let b = Tensor::<f64>::zeros(vec![3, 5]).unwrap();
    assert!(FeatureBatch::new(a, b).is_err());
    assert!(sc_pair_loss(&[0.0, 1.0], &[0.0], &[1.0]).is_err());
}
