//! Desk-scale laboratory for three quantitative claims about minimal
//! transformers: O(1/n) noise scaling of hidden representations,
//! additive bias/variance/entropy decomposition of next-token loss,
//! and SNR-threshold capability emergence.

pub mod biasvar;
pub mod cltlab;
pub mod emergence;
pub mod error;
pub mod linalg;
pub mod nanoformer;
pub mod plot;
pub mod rng;
pub mod runner;
pub mod sources;
pub mod stats;

pub use error::{LabError, Result};
