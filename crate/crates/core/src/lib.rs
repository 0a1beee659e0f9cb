pub mod contrastive;
pub mod diffcore;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod evalbench;
pub mod experiment;
pub mod features;
pub mod masking;

pub use error::{Error, Result};
