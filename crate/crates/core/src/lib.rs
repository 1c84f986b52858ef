//! Label-conditioned histology image synthesis.

pub mod concordance;
pub mod data_model;
pub mod error;
pub mod init;
pub mod latent;
pub mod networks;
pub mod seg_eval;
pub mod stain_prep;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
