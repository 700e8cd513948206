//! Forward and analytic backward kernels on plain tensors.

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod pool;

pub use batchnorm::{fold_batch_norm, FrozenBatchNorm};
pub use conv::{conv2d, conv2d_backward, Conv2dGrads};
pub use linear::{fully_connected, fully_connected_backward};
pub use pool::{
    avg_pool2d, global_avg_pool, max_pool2d, relu, PoolSpec,
};
