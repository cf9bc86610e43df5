//! Vessel-mixing consistency regularization for unsupervised domain-adaptive
//! artery/vein segmentation.
//!
//! A student U-Net is trained on labeled source images while a mean-teacher
//! copy supplies targets on regionally mixed, unlabeled target images.

pub mod autodiff;
pub mod error;
pub mod gradsuite;

pub use error::{Error, Result};
pub mod data;
pub mod losses;
pub mod model;
pub mod perturb;
pub mod metrics;
pub mod trainer;
