pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod decoding;
pub mod diffmath;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod promptsearch;
pub mod seqpolicy;
pub mod trainer;

pub use error::{Result, RiffError};
