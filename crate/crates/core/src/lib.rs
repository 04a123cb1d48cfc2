//! No-reference image quality assessment with multi-dimension attention:
//! channel-wise transposed attention and shifted-window spatial attention
//! over ViT-style features, scored by a dual-branch patch-weighted head.
//!
//! Everything runs on a small `f64` reverse-mode autodiff tape ([`graph`]),
//! so every gradient can be checked against finite differences.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Maniqa, ModelConfig};
pub use params::{Ctx, ParamStore};
pub use tensor::Tensor;
