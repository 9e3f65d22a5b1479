//! Quantitative MRI reconstruction on synthetic phantoms.
//!
//! The crate covers the whole chain from tissue parameters to parameter
//! estimates: Bloch-model signal simulation ([`bloch`]), the subsampled
//! Fourier measurement operator ([`forward`]), and the reconstruction
//! families built on top of them:
//!
//! * dictionary matching and projected Landweber ([`mrf`]),
//! * integrated-physics Levenberg-Marquardt ([`integrated`]),
//! * TV/TGV variational reconstruction and the two-step pipeline ([`varreg`]),
//! * blind compressed sensing with a learned orthogonal transform ([`dictlearn`]),
//! * ESTATICS fitting and adaptive weights smoothing ([`aws`]),
//! * a neural surrogate of the Bloch map ([`surrogate`]).
//!
//! All arrays use one canonical row-major voxel order, see [`Grid`].

// NaN-rejecting `!(x > 0.0)` checks and index loops over small fixed-size
// matrices are used deliberately.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aws;
pub mod bloch;
pub mod dictlearn;
pub mod error;
pub mod forward;
pub mod grid;
pub mod harness;
pub mod integrated;
pub mod linalg;
pub mod metrics;
pub mod mrf;
pub mod params;
pub mod rawio;
pub mod rng;
pub mod series;
pub mod surrogate;
pub mod varreg;

pub use error::{Error, Result};
pub use grid::Grid;
pub use num_complex::Complex64;
pub use params::{project_box, AdmissibleBox, ParamMap};
pub use rng::SeededRng;
pub use series::{ImageSeries, KSpaceData, Mask};
