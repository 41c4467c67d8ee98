pub mod adsn;
pub mod baseline;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod events;
pub mod ingest;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod training;
pub mod v2e;
pub mod verify;

pub use error::{Error, ErrorKind, Result};
