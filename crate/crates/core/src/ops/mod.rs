//! Differentiable primitive operations on batched `[batch, channels, height, width]`
//! tensors. Every forward function is pure; backward functions take the
//! state the forward saved and return gradients with respect to each input.

mod activation;
mod conv;
mod linear;
mod norm;
mod pool;

pub use activation::{
    cross_entropy, dropout, dropout_mask, relu, relu_backward, softmax, softmax_rows,
    softmax_xent, softmax_xent_backward,
};
pub use conv::{conv2d, conv2d_backward, Padding};
pub use linear::{
    concat_channels, gap, gap_backward, gwap, gwap_backward, linear, linear_backward,
    split_channels,
};
pub use norm::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, BnCache, RunningStats, BN_EPSILON,
    BN_MOMENTUM,
};
pub use pool::{maxpool2x2, maxpool2x2_backward};

use serde::{Deserialize, Serialize};

/// Whether an op runs with training semantics (batch statistics, dropout)
/// or inference semantics (running statistics, identity dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) fn expect_4d<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::dim(format!("{what}: expected [batch, channels, h, w], got {s:?}"))),
    }
}

pub(crate) fn expect_2d<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::dim(format!("{what}: expected a matrix, got {s:?}"))),
    }
}
