//! Differentiable primitives. Each forward has a matching analytic backward.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dropout;
pub mod loss;
pub mod pool;

pub use activation::{activation, activation_backward, Activation, LEAKY_ALPHA};
pub use batchnorm::{batch_norm, batch_norm_backward, BatchNormCache, BatchNormState, Mode};
pub use conv::{conv2d, conv2d_backward, output_extent, ConvGrads, ConvSpec, Padding};
pub use dropout::{dropout, dropout_backward};
pub use loss::softmax_cross_entropy;
pub use pool::{global_avg_pool, global_avg_pool_backward};
