//! Multiplicative tampering attacks on random processes.

pub mod adversarial;
pub mod error;
pub mod harness;
pub mod mean;
pub mod pexp;
pub mod rng;
pub mod reductions;
pub mod space;
pub mod stats;
pub mod tamper;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use space::{
    BlockDomain, BlockLaw, ConditionalProcess, MembershipOracle, ProductProcess, RandomProcess, Value,
    WeightVector,
};
