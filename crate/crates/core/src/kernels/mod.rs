//! Dense forward/backward kernels.

pub mod activation;
pub mod concat;
pub mod conv;
pub mod fc;
pub mod loss;
pub mod pool;
pub mod stochastic_pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar};
pub use concat::{concat_channels, concat_channels_backward};
pub use conv::{conv2d, conv2d_backward, deconv2d, deconv2d_backward, ConvGrads, ConvParams, DeconvGrads, DeconvParams};
pub use fc::{fully_connected, fully_connected_backward, FcGrads, FcParams};
pub use loss::{smooth_l1, smooth_l1_with, softmax, softmax_cross_entropy};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, MaxPoolOutput};
pub use stochastic_pool::{stochastic_pool_backward, stochastic_pool_channel, stochastic_pool_channel_traced, PoolMode, PooledValue};
