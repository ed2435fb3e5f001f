//! Small dense and convolutional layer set with hand-written backward passes.

mod attention;
mod gradcheck;
mod layers;
mod optim;
mod params;
mod tensor;

pub use attention::{
    layer_stack_forward, multi_head_attention, AttentionCache, AttentionGrads, BlockCache, LayerStack, Mlp,
    MlpCache, MultiHeadAttention, StackCache, TransformerBlock,
};
pub use gradcheck::grad_check;
pub use layers::{sigmoid, Activation, Conv2d, LayerNorm, LayerNormCache, Linear};
pub use optim::{optimizer_step, OptimizerKind, DEFAULT_LEARNING_RATE};
pub use params::{NetParams, ParamId};
pub use tensor::{matmul, matmul_nt, matmul_tn, softmax_rows, Tensor};
