//! Dense `f64` tensors with reverse-mode differentiation.

mod attention;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use attention::{multi_head_attention, AttentionVars};
pub use gradcheck::{check_graph_fn, finite_diff_check, GradCheck, GRAD_FLOOR};
pub use graph::{Graph, Var};
pub use kernels::{cosine, softmax_temp, NORM_EPS};
pub use tensor::Tensor;
