mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use spatial_contrast::tensor::*;

fn conv_case(seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, ConvGeometry) {
    let mut r = rng(seed);
    let (n, c, k) = (
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(1..5),
    );
    let kh = r.random_range(1..4);
    let kw = r.random_range(1..4);
    let stride = r.random_range(1..3);
    let pad = r.random_range(0..2);
    let h = r.random_range(kh.max(2)..9);
    let w = r.random_range(kw.max(2)..9);
    (
        random_tensor(&mut r, &[n, c, h, w]),
        random_tensor(&mut r, &[k, c, kh, kw]),
        random_tensor(&mut r, &[k]),
        ConvGeometry::new(stride, pad),
    )
}

#[test]
fn conv2d_matches_loop_reference() {
    for seed in 0..200 {
        let (x, w, b, g) = conv_case(seed);
        let s = x.shape();
        let ws = w.shape();
        let (want, oh, ow) = naive_conv2d(
            x.data(),
            (s[0], s[1], s[2], s[3]),
            w.data(),
            (ws[0], ws[2], ws[3]),
            b.data(),
            g.stride,
            g.pad,
        );
        let got = conv2d(&x, &w, &b, g).unwrap();
        assert_eq!(got.shape(), &[s[0], ws[0], oh, ow]);
        let worst = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "seed {seed}: {worst}");
    }
}

#[test]
fn conv2d_f32_matches_loop_reference() {
    for seed in 0..50 {
        let (x, w, b, g) = conv_case(seed);
        let s = x.shape();
        let ws = w.shape();
        let (want, _, _) = naive_conv2d(
            x.data(),
            (s[0], s[1], s[2], s[3]),
            w.data(),
            (ws[0], ws[2], ws[3]),
            b.data(),
            g.stride,
            g.pad,
        );
        let got = conv2d(&x.cast::<f32>(), &w.cast::<f32>(), &b.cast::<f32>(), g).unwrap();
        let worst = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "seed {seed}: {worst}");
    }
}

#[test]
fn maxpool_and_gap_match_loop_reference() {
    for seed in 0..200 {
        let mut r = rng(1000 + seed);
        let (n, c) = (r.random_range(1..4), r.random_range(1..4));
        let size = r.random_range(1..4);
        let stride = r.random_range(1..4);
        let h = r.random_range(size..10);
        let w = r.random_range(size..10);
        let x = random_tensor(&mut r, &[n, c, h, w]);
        let (pooled, _) = maxpool2d(&x, size, stride).unwrap();
        let want = naive_maxpool(x.data(), (n, c, h, w), size, stride);
        assert_eq!(pooled.data(), &want[..]);
        let gap = global_avg_pool(&x).unwrap();
        assert_eq!(gap.shape(), &[n, c]);
        let want = naive_gap(x.data(), (n, c, h, w));
        let worst = gap
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6);
    }
}

#[test]
fn conv2d_is_linear_in_the_input() {
    for seed in 0..30 {
        let (x, w, _, g) = conv_case(seed);
        let mut r = rng(seed + 77);
        let y = random_tensor(&mut r, x.shape());
        let zero = Tensor::zeros(vec![w.shape()[0]]).unwrap();
        let (a, b) = (0.7, -1.3);
        let mix = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| a * p + b * q)
                .collect(),
        )
        .unwrap();
        let lhs = conv2d(&mix, &w, &zero, g).unwrap();
        let cx = conv2d(&x, &w, &zero, g).unwrap();
        let cy = conv2d(&y, &w, &zero, g).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            assert!((l - (a * p + b * q)).abs() < 1e-9);
        }
    }
}

#[test]
fn pool_backward_routes_to_the_recorded_max() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[2, 3, 6, 6]);
    let (y, idx) = maxpool2d(&x, 2, 2).unwrap();
    for (out, &src) in y.data().iter().zip(idx.argmax()) {
        assert_eq!(*out, x.data()[src]);
    }
    let g = Tensor::full(y.shape().to_vec(), 1.0).unwrap();
    let back = maxpool2d_backward(&idx, &g).unwrap();
    assert_eq!(back.data().iter().sum::<f64>(), y.len() as f64);
}

proptest! {
    #[test]
    fn every_pooled_value_lies_in_its_window(
        h in 2usize..9, w in 2usize..9, size in 1usize..3, stride in 1usize..3, seed in 0u64..1000
    ) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[1, 2, h, w]);
        let (y, _) = maxpool2d(&x, size, stride).unwrap();
        let (oh, ow) = (y.shape()[2], y.shape()[3]);
        for c in 0..2 {
            for i in 0..oh {
                for j in 0..ow {
                    let v = y.data()[(c * oh + i) * ow + j];
                    let mut found = false;
                    for u in 0..size {
                        for t in 0..size {
                            found |= x.data()[(c * h + i * stride + u) * w + j * stride + t] == v;
                        }
                    }
                    prop_assert!(found);
                }
            }
        }
    }

    #[test]
    fn gap_backward_is_uniform(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let g = Tensor::full(vec![n, c], 1.0f64).unwrap();
        let back = global_avg_pool_backward(&[n, c, h, w], &g).unwrap();
        for v in back.data() {
            prop_assert!((v - 1.0 / (h * w) as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn shape_errors_name_the_dimension() {
    let x = Tensor::<f64>::zeros(vec![1, 3, 5, 5]).unwrap();
    let w = Tensor::<f64>::zeros(vec![2, 4, 3, 3]).unwrap();
    let b = Tensor::<f64>::zeros(vec![2]).unwrap();
    let err = conv2d(&x, &w, &b, ConvGeometry::default()).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
    let big = Tensor::<f64>::zeros(vec![2, 3, 7, 7]).unwrap();
    let err = conv2d(&x, &big, &b, ConvGeometry::default()).unwrap_err();
    assert!(
        err.to_string().contains("height") || err.to_string().contains("kernel"),
        "{err}"
    );
}
