//! Neural operators: convolution, pooling, upsampling, fully connected
//! maps, activations, batch normalisation, concatenation and the training
//! loss.

mod activation;
mod combine;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use activation::{relu, sigmoid, sigmoid_scalar, tanh_act};
pub use combine::{channel_scale, concat_channels, shared_hadamard};
pub use conv::{conv2d, same_padding, up_conv, Conv2d};
pub use linear::{fc, Linear};
pub use loss::{class_ids, softmax_ce_loss, softmax_channels};
pub use norm::{BatchNorm, BN_EPS, BN_MOMENTUM};
pub use pool::{gap, maxpool2, upsample2};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Whether batch normalisation uses batch statistics (and updates its
/// running averages) or the frozen running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub(crate) fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::shape(format!("expected [B, C, H, W], got {s:?}"))),
    }
}
