use super::gemm::{gemm, Mat};
use super::{Result, Scalar, Tensor, TensorError};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let data = input.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_parts(input.shape().to_vec(), data).finite("relu")
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "relu_backward";
    if input.shape() != grad_out.shape() {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "elements",
            expected: input.len(),
            actual: grad_out.len(),
        });
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data).finite(OP)
}

#[derive(Debug, Clone)]
pub struct AffineGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `(N, features)` view of an input of any rank >= 2.
fn flat_dims<T: Scalar>(op: &'static str, input: &Tensor<T>) -> Result<(usize, usize)> {
    if input.rank() < 2 {
        return Err(TensorError::Rank {
            op,
            expected: 2,
            shape: input.shape().to_vec(),
        });
    }
    let n = input.shape()[0];
    Ok((n, input.len() / n))
}

fn check_weight<T: Scalar>(
    op: &'static str,
    weight: &Tensor<T>,
    features: usize,
) -> Result<(usize, usize)> {
    let (out, inp) = weight.dims2(op)?;
    if inp != features {
        return Err(TensorError::DimMismatch {
            op,
            dim: "affine input features",
            expected: inp,
            actual: features,
        });
    }
    Ok((out, inp))
}

/// Fully connected layer `y = x W^T + b`, with `weight` shaped
/// `[out, in]`. Inputs of rank > 2 are flattened per sample.
pub fn affine<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "affine";
    let (n, features) = flat_dims(OP, input)?;
    let (out, _) = check_weight(OP, weight, features)?;
    if bias.shape() != [out] {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "bias length",
            expected: out,
            actual: bias.len(),
        });
    }
    let mut y: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(
        Mat::new(input.data(), n, features),
        Mat::new(weight.data(), out, features).t(),
        T::one(),
        &mut y,
    );
    Tensor::from_parts(vec![n, out], y).finite(OP)
}

pub fn affine_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<AffineGrads<T>> {
    const OP: &str = "affine_backward";
    let (n, features) = flat_dims(OP, input)?;
    let (out, _) = check_weight(OP, weight, features)?;
    let (gn, gout) = grad_out.dims2(OP)?;
    if gn != n || gout != out {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: if gn != n {
                "batch"
            } else {
                "affine output features"
            },
            expected: if gn != n { n } else { out },
            actual: if gn != n { gn } else { gout },
        });
    }
    let g = Mat::new(grad_out.data(), n, out);
    let mut gx = vec![T::zero(); n * features];
    gemm(
        g,
        Mat::new(weight.data(), out, features),
        T::zero(),
        &mut gx,
    );
    let mut gw = vec![T::zero(); out * features];
    gemm(
        g.t(),
        Mat::new(input.data(), n, features),
        T::zero(),
        &mut gw,
    );
    let mut gb = vec![T::zero(); out];
    for row in grad_out.data().chunks_exact(out) {
        gb.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
    }
    Ok(AffineGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gx).finite(OP)?,
        weight: Tensor::from_parts(vec![out, features], gw).finite(OP)?,
        bias: Tensor::from_parts(vec![out], gb).finite(OP)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_and_masks_gradient() {
        let x = Tensor::<f64>::new(vec![4], vec![-1.0, 0.0, 2.0, -3.0]).unwrap();
        assert_eq!(relu(&x).unwrap().data(), &[0.0, 0.0, 2.0, 0.0]);
        let g = Tensor::full(vec![4], 5.0).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn affine_small_product() {
        let x = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn affine_flattens_feature_maps() {
        let x = Tensor::<f32>::full(vec![2, 2, 1, 1], 1.0).unwrap();
        let w = Tensor::full(vec![1, 2], 1.0).unwrap();
        let b = Tensor::zeros(vec![1]).unwrap();
        let y = affine(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[2.0, 2.0]);
    }

    #[test]
    fn affine_rejects_wrong_fan_in() {
        let x = Tensor::<f32>::zeros(vec![1, 3]).unwrap();
        let w = Tensor::zeros(vec![2, 4]).unwrap();
        let b = Tensor::zeros(vec![2]).unwrap();
        let err = affine(&x, &w, &b).unwrap_err();
        assert!(err.to_string().contains("affine input features"), "{err}");
    }
}
