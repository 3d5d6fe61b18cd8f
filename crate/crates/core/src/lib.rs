//! Federated-learning simulation engine for normalization-free CNNs with
//! channel attention.

pub mod error;
pub mod data;
pub mod dp;
pub mod fed;
pub mod nn;
pub mod analysis;
pub mod optim;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
