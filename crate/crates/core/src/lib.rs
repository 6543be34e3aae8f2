//! Pretraining of SE(3)-invariant molecular encoders by denoising pairwise
//! atomic distances, with the contrastive and predictive baselines and a
//! small fine-tuning harness.

pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod check;
pub mod ddm;
pub mod error;
pub mod fmt;
pub mod geom;
pub mod harness;

pub use error::{Error, Result};
