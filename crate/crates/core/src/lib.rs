//! Edge-aware multi-label node classification on species-split protein graphs.

pub mod calibrate;
pub mod cli;
pub mod error;
pub mod graphstore;
pub mod labelcorr;
pub mod metrics;
pub mod models;
pub mod posthoc;
pub mod report;
pub mod tensor_ad;
pub mod trainer;

pub use error::{Error, Result};
