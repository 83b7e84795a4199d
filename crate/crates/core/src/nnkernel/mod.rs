//! Dense-tensor kernels: layer forward/backward passes, softmax cross-entropy,
//! the parameter store and the momentum SGD optimizer.

pub mod activation;
pub mod conv;
pub mod fc;
pub mod linalg;
pub mod loss;
pub mod params;
pub mod pool;
pub mod sgd;
pub mod tensor;

pub use activation::{dropout_backward, dropout_forward, relu_backward, relu_forward, Mode};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use fc::{fc_backward, fc_forward};
pub use loss::{softmax, softmax_xent};
pub use params::{ParamEntry, ParamSet};
pub use pool::{maxpool_forward, pool_backward};
pub use sgd::{lr_schedule, sgd_step, SgdConfig};
pub use tensor::{DType, Tensor};
