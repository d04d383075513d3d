//! Spatial contrasting criterion.
//!
//! For a batch of `N` images with anchor features `f1[i]` and positive
//! features `f2[i]`, the distance matrix is `d[i][j] = ||f1[i] - f2[j]||_2`
//! (unsquared) and the loss is the mean over anchors of the negative
//! log-softmax of `-d[i][.]` evaluated at the matching column:
//!
//! ```text
//! L = -(1/N) sum_i log( exp(-d[i][i]) / sum_j exp(-d[i][j]) )
//! ```
//!
//! The denominator runs over every `j`, including `j = i`. Log-sum-exp is
//! shifted by the row maximum so distances up to `1e6` stay finite.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScLossError {
    #[error("feature vectors differ in length: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("anchor features are {anchor:?} but positive features are {positive:?}")]
    BatchShape {
        anchor: Vec<usize>,
        positive: Vec<usize>,
    },
    #[error("feature input contains a non-finite value")]
    NonFinite,
    #[error("{taps} tap batches but {weights} weights")]
    WeightCount { taps: usize, weights: usize },
    #[error("tap weight {0} is negative or not finite")]
    BadWeight(f64),
    #[error("no tap batches given")]
    NoTaps,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ScLossError> = std::result::Result<T, E>;

fn l2_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

fn check_vec<T: Scalar>(v: &[T]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ScLossError::NonFinite)
    }
}

/// Pairwise loss for one anchor `f1_1`, its positive `f1_2` and one
/// contrasting feature `f2_1` from another image:
/// `-log( e^{-d+} / (e^{-d+} + e^{-d-}) )`.
pub fn sc_pair_loss<T: Scalar>(f1_1: &[T], f1_2: &[T], f2_1: &[T]) -> Result<T> {
    if f1_1.len() != f1_2.len() {
        return Err(ScLossError::DimMismatch(f1_1.len(), f1_2.len()));
    }
    if f1_1.len() != f2_1.len() {
        return Err(ScLossError::DimMismatch(f1_1.len(), f2_1.len()));
    }
    check_vec(f1_1)?;
    check_vec(f1_2)?;
    check_vec(f2_1)?;
    let pos = -l2_distance(f1_1, f1_2);
    let neg = -l2_distance(f1_1, f2_1);
    let m = pos.max(neg);
    let lse = m + ((pos - m).exp() + (neg - m).exp()).ln();
    Ok((lse - pos).max(T::zero()))
}

/// Anchor (`f1`) and positive (`f2`) features, both `[N, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch<T> {
    f1: Tensor<T>,
    f2: Tensor<T>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn new(f1: Tensor<T>, f2: Tensor<T>) -> Result<Self> {
        f1.dims2("feature batch")?;
        if f1.shape() != f2.shape() {
            return Err(ScLossError::BatchShape {
                anchor: f1.shape().to_vec(),
                positive: f2.shape().to_vec(),
            });
        }
        check_vec(f1.data())?;
        check_vec(f2.data())?;
        Ok(FeatureBatch { f1, f2 })
    }

    pub fn from_rows(f1: &[Vec<T>], f2: &[Vec<T>]) -> Result<Self> {
        let n = f1.len();
        let d = f1.first().map_or(0, Vec::len);
        let flat = |rows: &[Vec<T>]| -> Result<Vec<T>> {
            let mut out = Vec::with_capacity(n * d);
            for r in rows {
                if r.len() != d {
                    return Err(ScLossError::DimMismatch(d, r.len()));
                }
                out.extend_from_slice(r);
            }
            Ok(out)
        };
        let a = Tensor::new(vec![n, d], flat(f1)?)?;
        let b = Tensor::new(vec![f2.len(), d], flat(f2)?)?;
        Self::new(a, b)
    }

    pub fn anchors(&self) -> &Tensor<T> {
        &self.f1
    }

    pub fn positives(&self) -> &Tensor<T> {
        &self.f2
    }

    pub fn len(&self) -> usize {
        self.f1.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.f1.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScLoss<T> {
    pub loss: T,
    pub grad_f1: Tensor<T>,
    pub grad_f2: Tensor<T>,
    /// Entry `(i, j)` is `||f1[i] - f2[j]||_2`.
    pub distance_matrix: Tensor<T>,
}

/// Batch loss with analytic gradients.
///
/// With `p[i][j]` the row softmax of `-d`, `dL/dd[i][j] = (δij - p[i][j]) / N`.
/// The gradient of `||u||` at `u = 0` is taken to be zero.
pub fn sc_batch_loss<T: Scalar>(batch: &FeatureBatch<T>) -> Result<ScLoss<T>> {
    let n = batch.len();
    let d = batch.dim();
    let f1 = batch.f1.data();
    let f2 = batch.f2.data();

    let mut dist = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = l2_distance(&f1[i * d..(i + 1) * d], &f2[j * d..(j + 1) * d]);
        }
    }

    let inv_n = T::one() / T::of(n as f64);
    let mut total = T::zero();
    let mut dl_dd = vec![T::zero(); n * n];
    for i in 0..n {
        let r = &dist[i * n..(i + 1) * n];
        let m = r.iter().fold(T::infinity(), |acc, &v| acc.min(v));
        // logits are -d; the row max of the logits is -m
        let sum: T = r.iter().map(|&v| (m - v).exp()).sum();
        let lse = -m + sum.ln();
        total += (r[i] + lse).max(T::zero());
        let mut psum = T::zero();
        for j in 0..n {
            let p = (-r[j] - lse).exp();
            psum += p;
            let delta = if i == j { T::one() } else { T::zero() };
            dl_dd[i * n + j] = (delta - p) * inv_n;
        }
        debug_assert!(
            (psum - T::one()).abs() < T::of(1e-4),
            "softmax row sums to {psum}"
        );
    }

    let mut g1 = vec![T::zero(); n * d];
    let mut g2 = vec![T::zero(); n * d];
    for i in 0..n {
        for j in 0..n {
            let dij = dist[i * n + j];
            let coef = dl_dd[i * n + j];
            if dij == T::zero() || coef == T::zero() {
                continue;
            }
            let scale = coef / dij;
            for k in 0..d {
                let u = (f1[i * d + k] - f2[j * d + k]) * scale;
                g1[i * d + k] += u;
                g2[j * d + k] -= u;
            }
        }
    }

    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(ScLossError::NonFinite);
    }
    Ok(ScLoss {
        loss,
        grad_f1: Tensor::new(vec![n, d], g1)?,
        grad_f2: Tensor::new(vec![n, d], g2)?,
        distance_matrix: Tensor::new(vec![n, n], dist)?,
    })
}

/// Weighted sum of per-tap batch losses.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTapLoss<T> {
    /// `sum_t weight_t * loss_t`.
    pub loss: T,
    /// Per tap: the unweighted loss and distance matrix, with gradients
    /// already multiplied by the tap weight.
    pub taps: Vec<ScLoss<T>>,
}

pub fn sc_multi_tap_loss<T: Scalar>(
    batches: &[FeatureBatch<T>],
    weights: &[f64],
) -> Result<MultiTapLoss<T>> {
    if batches.is_empty() {
        return Err(ScLossError::NoTaps);
    }
    if batches.len() != weights.len() {
        return Err(ScLossError::WeightCount {
            taps: batches.len(),
            weights: weights.len(),
        });
    }
    let mut loss = T::zero();
    let mut taps = Vec::with_capacity(batches.len());
    for (batch, &w) in batches.iter().zip(weights) {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(ScLossError::BadWeight(w));
        }
        let mut tap = sc_batch_loss(batch)?;
        let wt = T::of(w);
        loss += wt * tap.loss;
        tap.grad_f1 = tap.grad_f1.scale(wt)?;
        tap.grad_f2 = tap.grad_f2.scale(wt)?;
        taps.push(tap);
    }
    Ok(MultiTapLoss { loss, taps })
}
