//! Hand-written forward/backward kernels.
//!
//! Every backward function takes the upstream gradient and returns the
//! gradient with respect to its input plus any parameter gradients. All
//! tensors are `N × C × H × W` unless stated otherwise.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar};
pub use batchnorm::{BatchNorm2d, BnCache, BnGrads, BnMode};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvGrads};
pub use gradcheck::finite_difference_check;
pub use linear::{Linear, LinearGrads};
pub use loss::softmax_cross_entropy;
pub use pool::{
    global_avg_pool, global_avg_pool_backward, global_max_pool, global_max_pool_backward,
    maxpool2d, maxpool2d_backward, PoolIndices,
};
