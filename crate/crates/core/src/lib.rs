//! Memory-constrained streaming testers for uniformity and closeness of
//! discrete distributions.

pub mod base;
pub mod batch;
pub mod calibration;
pub mod compressed;
pub mod compression;
pub mod error;
pub mod harness;
pub mod ledger;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use ledger::{bits_for_counter, BitLedger};
pub use model::{Counts, Pmf, ProblemParams, SampleStream, Verdict};
