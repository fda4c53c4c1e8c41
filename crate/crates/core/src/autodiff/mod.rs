//! Reverse-mode differentiation over dense `f64` arrays.

mod array;
pub mod checkpoint;
mod gradcheck;
mod graph;

pub use array::Array;
pub use gradcheck::{check_gradient, finite_difference_check, relative_error, GradCheck, GradCheckReport};
pub use graph::{logit, sigmoid, CustomOp, Gradients, Graph, NodeId};
