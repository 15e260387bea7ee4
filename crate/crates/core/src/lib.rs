#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod blending;
pub mod diffusion_toy;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod metrics_flops;
pub mod gradcheck;
pub mod prompt_enrichment;
pub mod pruned_attention;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
