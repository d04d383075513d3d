//! Straight-loop reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_contrast::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Cross-correlation with zero padding, one output element at a time.
pub fn naive_conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (k, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * k * oh * ow];
    for b in 0..n {
        for o in 0..k {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[o];
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xi = ((b * c + ch) * h + y as usize) * w + xx as usize;
                                let wi = ((o * c + ch) * kh + u) * kw + v;
                                acc += x[xi] * wt[wi];
                            }
                        }
                    }
                    out[((b * k + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn naive_maxpool(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    size: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for u in 0..size {
                    for v in 0..size {
                        m = m.max(x[(plane * h + i * stride + u) * w + j * stride + v]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn naive_gap(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    (0..n * c)
        .map(|p| x[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect()
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Batch contrastive loss evaluated term by term with plain exp/ln.
pub fn naive_sc_loss(f1: &[Vec<f64>], f2: &[Vec<f64>]) -> f64 {
    let n = f1.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (-l2(&f1[i], &f2[i])).exp();
        let den: f64 = (0..n).map(|j| (-l2(&f1[i], &f2[j])).exp()).sum();
        total += -(num / den).ln();
    }
    total / n as f64
}

/// Central-difference gradient.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
