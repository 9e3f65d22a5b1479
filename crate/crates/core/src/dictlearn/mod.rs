//! Blind compressed sensing with a learned orthogonal patch transform, for
//! single images and for parameter maps.

pub mod bcs;
pub mod patch;
pub mod maps;

pub use bcs::{bcs_reconstruct, bcs_series, BcsConfig, BcsResult};
pub use patch::{image_update, procrustes, sparse_code_update, transform_update, PatchOp, Sparsity, Transform};
pub use maps::{bcs_qmri_reconstruct, BcsQmriConfig, BcsQmriResult, ParamStep};
