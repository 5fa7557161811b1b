//! Dense `f32`/`f64` tensors and a reverse-mode tape covering the ops of a
//! small U-Net style segmentation network: convolution (grouped and
//! depthwise), batch norm, pooling, upsampling, concatenation, elementwise
//! arithmetic and sigmoid focal loss. Also provides RMSProp with an
//! exponential schedule and a checkpoint format.

mod conv;
mod error;
mod scalar;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;

pub use conv::Conv2dSpec;
pub use error::{Result, TensorError};
pub use optim::{OptimState, RmsProp};
pub use scalar::Scalar;
pub use tape::{BatchNormMode, BatchStats, RunningStats, Tape, UpsampleMode, Var};
pub use tensor::Tensor;
