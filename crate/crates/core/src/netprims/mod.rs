//! Differentiable computational primitives: tensors, the parameter store,
//! convolution, residual blocks, batch norm, multi-head attention, the
//! softmax cross-entropy loss and optimizers, plus binary checkpoints.
//!
//! Every primitive's backward pass is validated against central finite
//! differences in double precision (see `gradcheck` and the crate's gradient
//! test suite). Forward passes are deterministic given parameters and inputs.

pub mod activation;
pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod params;
pub mod resblock;
pub mod tensor;

pub use activation::{relu, relu_backward};
pub use attention::{
    attention_intersample, attention_intersample_backward, self_attention_intrasample,
    MhaCache, MultiHeadAttention,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use conv::{conv_out_len, Conv1d, ConvInit, Padding};
pub use linear::Linear;
pub use loss::{softmax, softmax_cross_entropy};
pub use norm::{BatchNorm, BnCache};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Grads, ParamId, ParamStore};
pub use resblock::{ResBlock, ResBlockCache};
pub use tensor::Tensor2;
