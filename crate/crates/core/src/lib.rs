//! Training stack for learned input preprocessing: a reverse-mode autodiff
//! tensor engine, u-net style preprocessing and stand-in target networks,
//! seeded image degradations, synthetic datasets, the training schemes that
//! couple a preprocessing network to a target model, and evaluation metrics.

pub mod data;
pub mod degrade;
pub mod error;
pub mod gradsuite;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{IonError, Result};
