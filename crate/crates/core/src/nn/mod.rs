//! Dense tensors with reverse-mode gradients, and the layers built on them.

mod gradcheck;
mod graph;
mod layers;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, FD_STEP, REL_ERROR_FLOOR};
pub use graph::{CustomBackward, Gradients, Graph, Segment, Var};
pub use layers::{
    sinusoidal_positions, LayerNorm, LayerOutput, Linear, Mlp, ParamBuilder, ParamSet,
    TransformerLayer, LAYER_NORM_EPS,
};
pub use tensor::{Scalar, Tensor};
