//! A small 3D convolutional network engine with hand-written backward
//! passes: exactly the layer set a 3D U-Net needs.
//!
//! Everything is generic over [`Real`] so training runs in `f32` while
//! gradient checks run in `f64` through the same code.

mod adam;
pub mod gradcheck;
mod layers;
mod loss;
mod tensor;
mod unet;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use adam::{AdamConfig, AdamState};
pub use layers::{
    batchnorm_backward, batchnorm_forward, concat_channels, conv3d_backward, conv3d_forward,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, split_channels,
    upconv2_backward, upconv2_forward, BatchNorm, BnCache, Conv3d, ConvGrads, PoolIndices, UpConv,
    BN_EPS, BN_MOMENTUM,
};
pub use loss::{bce_loss, sigmoid};
pub use tensor::Tensor5;
pub use unet::{ConvBn, DownBlock, ForwardCache, ParamKind, TensorView, UNetConfig, UNetModel, UpBlock};

pub trait Real:
    Float + Send + Sync + Default + Debug + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}
