use super::{expect_2d, expect_4d};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// `x [B, I] * w [I, O] + b [O]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, inp) = expect_2d(x, "linear input")?;
    let (wi, out) = expect_2d(w, "linear weight")?;
    if wi != inp || b.len() != out {
        return Err(Error::dim(format!(
            "linear: input width {inp}, weight {:?}, bias {:?}",
            w.shape(),
            b.shape()
        )));
    }
    let mut y: Vec<T> = (0..rows).flat_map(|_| b.data().iter().copied()).collect();
    gemm(MatRef::new(x.data(), rows, inp), MatRef::new(w.data(), inp, out), T::one(), &mut y);
    Tensor::new(&[rows, out], y)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (rows, inp) = expect_2d(x, "linear input")?;
    let (_, out) = expect_2d(w, "linear weight")?;
    grad_out.expect_shape(&[rows, out])?;
    let g = MatRef::new(grad_out.data(), rows, out);
    let mut gx = vec![T::zero(); rows * inp];
    gemm(g, MatRef::new(w.data(), inp, out).t(), T::zero(), &mut gx);
    let mut gw = vec![T::zero(); inp * out];
    gemm(MatRef::new(x.data(), rows, inp).t(), g, T::zero(), &mut gw);
    let mut gb = vec![T::zero(); out];
    for r in 0..rows {
        for (acc, &v) in gb.iter_mut().zip(&grad_out.data()[r * out..][..out]) {
            *acc = *acc + v;
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(w.shape(), gw)?, Tensor::new(&[out], gb)?))
}

/// Global weighted average pooling: `out[b, i] = sum_{j,k} w[i, j, k] * x[b, i, j, k]`.
pub fn gwap<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, wd) = expect_4d(x, "gwap input")?;
    if w.shape() != [c, h, wd] {
        return Err(Error::dim(format!(
            "gwap: weight {:?} does not match feature map {:?}",
            w.shape(),
            &x.shape()[1..]
        )));
    }
    let hw = h * wd;
    let mut out = Vec::with_capacity(b * c);
    for n in 0..b {
        for ch in 0..c {
            let xs = &x.data()[(n * c + ch) * hw..][..hw];
            let ws = &w.data()[ch * hw..][..hw];
            out.push(xs.iter().zip(ws).map(|(&a, &b)| a * b).sum());
        }
    }
    Tensor::new(&[b, c], out)
}

/// Returns `(grad_x, grad_w)` for [`gwap`].
pub fn gwap_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, wd) = expect_4d(x, "gwap input")?;
    grad_out.expect_shape(&[b, c])?;
    w.expect_shape(&[c, h, wd])?;
    let hw = h * wd;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for n in 0..b {
        for ch in 0..c {
            let g = grad_out.data()[n * c + ch];
            let off = (n * c + ch) * hw;
            for k in 0..hw {
                gx[off + k] = g * w.data()[ch * hw + k];
                gw[ch * hw + k] = gw[ch * hw + k] + g * x.data()[off + k];
            }
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(w.shape(), gw)?))
}

/// Global average pooling `[B, C, H, W] -> [B, C]`.
pub fn gap<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = expect_4d(x, "gap input")?;
    let hw = h * w;
    // Weighted by 1/(H*W) elementwise, in the same order as `gwap`, so a GWAP
    // with uniform weights is bitwise equal to this.
    let inv = T::lit(1.0 / hw as f64);
    let out = x.data().chunks(hw).map(|plane| plane.iter().map(|&v| v * inv).sum::<T>()).collect();
    Tensor::new(&[b, c], out)
}

pub fn gap_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let hw: usize = input_shape[2..].iter().product();
    grad_out.expect_shape(&input_shape[..2])?;
    let inv = T::lit(1.0 / hw as f64);
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
        .collect();
    Tensor::new(input_shape, data)
}

/// Concatenates two `[B, C, H, W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = expect_4d(a, "concat lhs")?;
    let (nb, cb, hb, wb) = expect_4d(b, "concat rhs")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::dim(format!("concat: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * la..][..la]);
        out.extend_from_slice(&b.data()[i * lb..][..lb]);
    }
    Tensor::new(&[n, ca + cb, h, w], out)
}

/// Inverse of [`concat_channels`]: splits after the first `first` channels.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = expect_4d(t, "split")?;
    if first == 0 || first >= c {
        return Err(Error::dim(format!("cannot split {c} channels at {first}")));
    }
    let (la, lb) = (first * h * w, (c - first) * h * w);
    let mut a = Vec::with_capacity(n * la);
    let mut b = Vec::with_capacity(n * lb);
    for chunk in t.data().chunks(la + lb) {
        a.extend_from_slice(&chunk[..la]);
        b.extend_from_slice(&chunk[la..]);
    }
    Ok((Tensor::new(&[n, first, h, w], a)?, Tensor::new(&[n, c - first, h, w], b)?))
}
