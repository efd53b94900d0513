// `!(x >= 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod sparsify;
pub mod spontaneous;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use model::{LinearSite, Model, ModelConfig, SiteKind};
pub use sparsify::SparsityProfile;
pub use spontaneous::SpontaneousParams;
pub use tensor::{Gradients, Tape, Tensor, Var};
