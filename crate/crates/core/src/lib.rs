//! Desk-scale filter-pruning laboratory.
//!
//! A small CNN is trained with soft filter pruning. At every pruning step a
//! set of candidate criteria (ℓp-norms and average Minkowski/cosine
//! distances between filters) each propose a pruning, and the one whose
//! pruned network stays closest to the unpruned network on a chosen
//! meta-attribute is applied.

pub mod checkpoint;
pub mod criteria;
pub mod data;
pub mod error;
pub mod filters;
pub mod flops;
pub mod gradcheck;
pub mod harness;
pub mod meta;
pub mod model;
pub mod report;
pub mod tensor;
pub mod visualize;

pub use criteria::{CriterionId, ScoreVector};
pub use error::{MfpError, Result};
pub use filters::{FilterBank, PruneMask};
pub use meta::{MetaAttributeId, PruneStepRecord};
pub use model::{ArchSpec, ConvSpec, ModelState};
pub use tensor::{GradPair, Tensor};
