//! Joint contrastive / masked-patch generative self-supervised pretraining
//! for multivariate time-series classification.

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod patchmask;
pub mod seeding;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
