use super::{ConvGeometry, Result, Scalar, Tensor, TensorError};

/// Flat input offsets of the selected maximum for every pooled output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Max pooling over `size x size` windows with the given stride and no
/// padding. Ties resolve to the first maximum in row-major window order.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolIndices)> {
    const OP: &str = "maxpool2d";
    let (n, c, h, w) = input.dims4(OP)?;
    if size == 0 {
        return Err(TensorError::ZeroParam {
            op: OP,
            param: "size",
        });
    }
    let geom = ConvGeometry::new(stride, 0);
    let oh = geom.output_extent(OP, "height", h, size)?;
    let ow = geom.output_extent(OP, "width", w, size)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ki in 0..size {
                    let row = base + (oy * stride + ki) * w + ox * stride;
                    for idx in row..row + size {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![n, c, oh, ow], out).finite(OP)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward<T: Scalar>(
    indices: &PoolIndices,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "maxpool2d_backward";
    if grad_out.len() != indices.argmax.len() {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "pooled elements",
            expected: indices.argmax.len(),
            actual: grad_out.len(),
        });
    }
    let mut grad = vec![T::zero(); indices.input_shape.iter().product()];
    for (&src, &g) in indices.argmax.iter().zip(grad_out.data()) {
        grad[src] += g;
    }
    Tensor::from_parts(indices.input_shape.clone(), grad).finite(OP)
}

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "global_avg_pool";
    let (n, c, h, w) = input.dims4(OP)?;
    let area = h * w;
    let inv = T::one() / T::of(area as f64);
    let out = input
        .data()
        .chunks_exact(area)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_parts(vec![n, c], out).finite(OP)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "global_avg_pool_backward";
    let &[n, c, h, w] = input_shape else {
        return Err(TensorError::Rank {
            op: OP,
            expected: 4,
            shape: input_shape.to_vec(),
        });
    };
    let (gn, gc) = grad_out.dims2(OP)?;
    if (gn, gc) != (n, c) {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: if gn != n { "batch" } else { "channels" },
            expected: if gn != n { n } else { c },
            actual: if gn != n { gn } else { gc },
        });
    }
    let area = h * w;
    let inv = T::one() / T::of(area as f64);
    let mut grad = Vec::with_capacity(n * c * area);
    for &g in grad_out.data() {
        grad.extend(std::iter::repeat_n(g * inv, area));
    }
    Tensor::from_parts(input_shape.to_vec(), grad).finite(OP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_of_constant_planes() {
        let x = Tensor::<f64>::new(
            vec![1, 2, 2, 2],
            vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0],
        )
        .unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn gap_of_unit_plane_squeezes() {
        let x =
            Tensor::<f32>::new(vec![2, 3, 1, 1], vec![0.1, -2.0, 3.5, 4.0, 5.0, -6.25]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn maxpool_picks_window_max_and_routes_gradient() {
        #[rustfmt::skip]
        let x = Tensor::<f64>::new(vec![1, 1, 2, 4], vec![
            1.0, 5.0, 2.0, 2.0,
            3.0, 4.0, 7.0, 2.0,
        ]).unwrap();
        let (y, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let g = Tensor::new(vec![1, 1, 1, 2], vec![10.0, 20.0]).unwrap();
        let gx = maxpool2d_backward(&idx, &g).unwrap();
        assert_eq!(gx.data(), &[0.0, 10.0, 0.0, 0.0, 0.0, 0.0, 20.0, 0.0]);
    }

    #[test]
    fn maxpool_ties_take_first() {
        let x = Tensor::<f32>::full(vec![1, 1, 2, 2], 3.0).unwrap();
        let (_, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(idx.argmax(), &[0]);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 2, 2]).unwrap();
        assert!(matches!(
            maxpool2d(&x, 3, 3).unwrap_err(),
            TensorError::KernelTooLarge { .. }
        ));
    }
}
