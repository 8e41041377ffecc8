use serde::{Deserialize, Serialize};

use super::expect_4d;
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side; requires an odd kernel.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(input: [usize; 3], kernel: [usize; 2], stride: usize, padding: Padding) -> Result<Self> {
        let [channels, height, width] = input;
        let [kh, kw] = kernel;
        if stride == 0 {
            return Err(Error::Param("convolution stride must be at least 1".into()));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::dim(format!(
                        "same padding needs an odd kernel, got {kh}x{kw}"
                    )));
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
        };
        if kh > height + 2 * pad_h || kw > width + 2 * pad_w {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                height + 2 * pad_h,
                width + 2 * pad_w
            )));
        }
        let out_h = (height + 2 * pad_h - kh) / stride + 1;
        let out_w = (width + 2 * pad_w - kw) / stride + 1;
        Ok(Self { channels, height, width, kh, kw, stride, pad_h, pad_w, out_h, out_w })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source pixel for kernel tap `(ky, kx)` at output `(oy, ox)`, or `None` in padding.
    #[inline]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_h)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_w)?;
        (y < self.height && x < self.width).then_some((y, x))
    }

    fn im2col<T: Scalar>(&self, input: &[T], col: &mut [T]) {
        let cols = self.col_cols();
        for c in 0..self.channels {
            let plane = &input[c * self.height * self.width..][..self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * cols..][..cols];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(ky, kx, oy, ox) {
                                Some((y, x)) => plane[y * self.width + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], grad_in: &mut [T]) {
        let cols = self.col_cols();
        for c in 0..self.channels {
            let plane = &mut grad_in[c * self.height * self.width..][..self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * cols..][..cols];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some((y, x)) = self.source(ky, kx, oy, ox) {
                                plane[y * self.width + x] =
                                    plane[y * self.width + x] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize, Geometry)> {
    let (batch, channels, height, width) = expect_4d(input, "conv2d input")?;
    let (out_c, in_c, kh, kw) = expect_4d(weight, "conv2d weight")?;
    if in_c != channels {
        return Err(Error::dim(format!(
            "conv2d: input has {channels} channels but kernel expects {in_c}"
        )));
    }
    let geom = Geometry::new([channels, height, width], [kh, kw], stride, padding)?;
    Ok((batch, out_c, geom))
}

/// 2-D cross-correlation without bias. `input` is `[B, C, H, W]`, `weight`
/// is `[O, C, kh, kw]`; output is `[B, O, H', W']`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (batch, out_c, g) = geometry(input, weight, stride, padding)?;
    let out_len = out_c * g.col_cols();
    let mut out = vec![T::zero(); batch * out_len];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    let w = MatRef::new(weight.data(), out_c, g.col_rows());
    for b in 0..batch {
        let x = &input.data()[b * g.in_len()..][..g.in_len()];
        let cols = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        gemm(
            w,
            MatRef::new(cols, g.col_rows(), g.col_cols()),
            T::zero(),
            &mut out[b * out_len..][..out_len],
        );
    }
    Tensor::new(&[batch, out_c, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, out_c, g) = geometry(input, weight, stride, padding)?;
    grad_out.expect_shape(&[batch, out_c, g.out_h, g.out_w])?;
    let out_len = out_c * g.col_cols();
    let mut grad_w = vec![T::zero(); weight.len()];
    let mut grad_in = vec![T::zero(); input.len()];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    let mut grad_col = vec![T::zero(); g.col_rows() * g.col_cols()];
    let w = MatRef::new(weight.data(), out_c, g.col_rows());
    for b in 0..batch {
        let x = &input.data()[b * g.in_len()..][..g.in_len()];
        let gy = MatRef::new(&grad_out.data()[b * out_len..][..out_len], out_c, g.col_cols());
        let cols = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        // grad_w += gy * cols^T
        gemm(gy, MatRef::new(cols, g.col_rows(), g.col_cols()).t(), T::one(), &mut grad_w);
        let gx = &mut grad_in[b * g.in_len()..][..g.in_len()];
        if g.is_pointwise() {
            gemm(w.t(), gy, T::zero(), gx);
        } else {
            gemm(w.t(), gy, T::zero(), &mut grad_col);
            g.col2im(&grad_col, gx);
        }
    }
    Ok((Tensor::new(input.shape(), grad_in)?, Tensor::new(weight.shape(), grad_w)?))
}
