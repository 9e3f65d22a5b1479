//! Variational qualitative reconstruction (TV, TGV) and the two-step qMRI
//! pipeline built on it.

pub mod ops;
pub mod pdhg;
pub mod twostep;

pub use ops::{div, grad, sym_grad, sym_grad_adjoint, SymField, VecField};
pub use pdhg::{pdhg_tgv, pdhg_tv, tv_series, FrameData, PdhgConfig, PdhgResult, WeightField};
pub use twostep::{refine_voxel, two_step_reconstruct, TwoStepConfig, TwoStepResult};
