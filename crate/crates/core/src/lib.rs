//! Category-aware data mixing and adaptive semantic topology refinement for
//! multi-source domain generalization, trained and evaluated on a
//! deterministic synthetic multi-domain image benchmark.

pub mod astr;
pub mod cdm;
pub mod error;
pub mod imgops;
pub mod nets;
pub mod pipeline;
pub mod report;
pub mod saliency;
pub mod synthdata;
pub mod tensor;

pub use error::{MireError, Result};
