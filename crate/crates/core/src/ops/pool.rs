use super::expect_4d;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat input index it was taken from. Ties resolve to
/// the lowest linear index in the window.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = expect_4d(input, "maxpool2x2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("maxpool2x2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for idx in [best + 1, best + w, best + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[b, c, oh, ow], out)?, argmax))
}

/// Routes each output gradient back to the input position that won the max.
pub fn maxpool2x2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    argmax: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::dim("maxpool2x2 backward: gradient does not match saved indices"));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g[idx] = g[idx] + v;
    }
    Ok(grad)
}
