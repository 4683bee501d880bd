//! Hybrid Attention Aggregation Transformer (HAAT) for single-image
//! super-resolution, running on the CPU with its own tape-based autograd.

pub mod attention;
pub mod autograd;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod eval;
pub mod imaging;
mod kernels;
pub mod layout;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod verification;
pub mod weights;

pub use autograd::{Activation, Gather, Grads, Graph, OpKind, Var};
pub use error::{Error, Result, WeightsError};
pub use tensor::{Real, Tensor};
pub use model::{build_model, Haat, ModelConfig};
pub use params::{Ctx, ParamStore};
