//! Multiparameter relaxometry fits and adaptive weights smoothing.

pub mod estatics;
pub mod smooth;

pub use estatics::*;
pub use smooth::{aws_smooth, kernel_smooth, smooth_qmaps, AwsConfig, AwsResult, SmoothedMaps};
