//! Dense tensors and the differentiation tape used to train the model.

mod tape;
mod tensor;

pub use tape::{softmax_row, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
