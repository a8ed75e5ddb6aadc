//! Two-stage volume segmentation: a slice detector that localises the target
//! structure, fully convolutional segmentation networks applied inside the
//! detected region, 3D post-processing and overlap evaluation.

pub mod arch;
pub mod config;
pub mod detect;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod postproc;
pub mod volume;
pub mod workflow;

pub use error::{CoreError, Result};
pub use volseg_grad as grad;
