use rayon::prelude::*;

use super::gemm::{gemm, Mat};
use super::{Result, Scalar, Tensor, TensorError};

/// Samples handled per parallel work item. Fixed so that reductions over the
/// batch happen in the same order regardless of thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry { stride: 1, pad: 0 }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeometry { stride, pad }
    }

    /// Output spatial size for an input extent and kernel extent.
    pub fn output_extent(
        &self,
        op: &'static str,
        dim: &'static str,
        input: usize,
        kernel: usize,
    ) -> Result<usize> {
        if self.stride == 0 {
            return Err(TensorError::ZeroParam {
                op,
                param: "stride",
            });
        }
        let padded = input + 2 * self.pad;
        if kernel == 0 || kernel > padded {
            return Err(TensorError::KernelTooLarge {
                op,
                dim,
                kernel,
                padded,
            });
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Layout {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeometry,
}

impl Layout {
    fn resolve<T: Scalar>(
        op: &'static str,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        geom: ConvGeometry,
    ) -> Result<Self> {
        let (n, c, h, w) = input.dims4(op)?;
        let (k, wc, kh, kw) = weight.dims4(op)?;
        if wc != c {
            return Err(TensorError::DimMismatch {
                op,
                dim: "weight input channels",
                expected: c,
                actual: wc,
            });
        }
        let oh = geom.output_extent(op, "height", h, kh)?;
        let ow = geom.output_extent(op, "width", w, kw)?;
        Ok(Layout {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            oh,
            ow,
            geom,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Source pixel for kernel tap (ki, kj) at output (oy, ox), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.geom.stride + ki).checked_sub(self.geom.pad)?;
        let x = (ox * self.geom.stride + kj).checked_sub(self.geom.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<T: Scalar>(&self, sample: &[T], col: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match self.source(oy, ox, ki, kj) {
                                Some((y, x)) => sample[(c * self.h + y) * self.w + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], sample: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, x)) = self.source(oy, ox, ki, kj) {
                                sample[(c * self.h + y) * self.w + x] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: &Tensor<T>, k: usize) -> Result<()> {
    if bias.rank() != 1 {
        return Err(TensorError::Rank {
            op,
            expected: 1,
            shape: bias.shape().to_vec(),
        });
    }
    if bias.len() != k {
        return Err(TensorError::DimMismatch {
            op,
            dim: "bias length",
            expected: k,
            actual: bias.len(),
        });
    }
    Ok(())
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
///
/// `input` is `[N, C, H, W]`, `weight` is `[K, C, kh, kw]` and `bias` is `[K]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let l = Layout::resolve(OP, input, weight, geom)?;
    check_bias(OP, bias, l.k)?;
    let plane = l.out_plane();
    let out_sample = l.k * plane;
    let mut out = vec![T::zero(); l.n * out_sample];
    let x = input.data();
    let wt = Mat::new(weight.data(), l.k, l.patch_len());

    out.par_chunks_mut(out_sample * CHUNK)
        .enumerate()
        .for_each(|(chunk, out_chunk)| {
            let mut col = vec![T::zero(); l.patch_len() * plane];
            for (j, dst) in out_chunk.chunks_mut(out_sample).enumerate() {
                let s = chunk * CHUNK + j;
                l.im2col(&x[s * l.in_sample()..(s + 1) * l.in_sample()], &mut col);
                for (kk, b) in bias.data().iter().enumerate() {
                    dst[kk * plane..(kk + 1) * plane].fill(*b);
                }
                gemm(wt, Mat::new(&col, l.patch_len(), plane), T::one(), dst);
            }
        });

    Tensor::from_parts(vec![l.n, l.k, l.oh, l.ow], out).finite(OP)
}

/// Gradients of `conv2d` with respect to its input, weight and bias given the
/// gradient of the output.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Conv2dGrads<T>> {
    const OP: &str = "conv2d_backward";
    let l = Layout::resolve(OP, input, weight, geom)?;
    let expected = [l.n, l.k, l.oh, l.ow];
    let (gn, gk, gh, gw) = grad_out.dims4(OP)?;
    for (dim, e, a) in [
        ("batch", expected[0], gn),
        ("channels", expected[1], gk),
        ("height", expected[2], gh),
        ("width", expected[3], gw),
    ] {
        if e != a {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim,
                expected: e,
                actual: a,
            });
        }
    }

    let plane = l.out_plane();
    let patch = l.patch_len();
    let in_sample = l.in_sample();
    let out_sample = l.k * plane;
    let x = input.data();
    let g = grad_out.data();
    let wt = Mat::new(weight.data(), l.k, patch);

    let mut grad_input = vec![T::zero(); l.n * in_sample];
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_input
        .par_chunks_mut(in_sample * CHUNK)
        .enumerate()
        .map(|(chunk, gin_chunk)| {
            let mut col = vec![T::zero(); patch * plane];
            let mut dcol = vec![T::zero(); patch * plane];
            let mut gw = vec![T::zero(); l.k * patch];
            let mut gb = vec![T::zero(); l.k];
            for (j, gin) in gin_chunk.chunks_mut(in_sample).enumerate() {
                let s = chunk * CHUNK + j;
                let gs = &g[s * out_sample..(s + 1) * out_sample];
                l.im2col(&x[s * in_sample..(s + 1) * in_sample], &mut col);
                gemm(
                    Mat::new(gs, l.k, plane),
                    Mat::new(&col, patch, plane).t(),
                    T::one(),
                    &mut gw,
                );
                gemm(wt.t(), Mat::new(gs, l.k, plane), T::zero(), &mut dcol);
                l.col2im(&dcol, gin);
                for (kk, b) in gb.iter_mut().enumerate() {
                    *b += gs[kk * plane..(kk + 1) * plane].iter().copied().sum::<T>();
                }
            }
            (gw, gb)
        })
        .collect();

    let mut gw = vec![T::zero(); l.k * patch];
    let mut gb = vec![T::zero(); l.k];
    for (pw, pb) in &partials {
        gw.iter_mut().zip(pw).for_each(|(a, b)| *a += *b);
        gb.iter_mut().zip(pb).for_each(|(a, b)| *a += *b);
    }

    Ok(Conv2dGrads {
        input: Tensor::from_parts(input.shape().to_vec(), grad_input).finite(OP)?,
        weight: Tensor::from_parts(weight.shape().to_vec(), gw).finite(OP)?,
        bias: Tensor::from_parts(vec![l.k], gb).finite(OP)?,
    })
}
