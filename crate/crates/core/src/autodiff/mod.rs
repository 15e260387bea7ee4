//! Reverse-mode differentiation over dense tensors.

mod graph;
mod params;

pub use graph::{
    bchw_to_tokens, lincomb_kernel, retract_scale, sigmoid, tokens_to_bchw, Binary, Graph, Unary, Var,
};
pub use params::{Adam, ParamId, ParamStore, Parameter};
