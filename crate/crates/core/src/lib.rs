//! GFlowNet training on finite DAG environments with reference-flow
//! stabilization and total-variation certificates.

pub mod approximator;
pub mod certify;
pub mod config;
pub mod envs;
mod error;
pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use envs::{DagEnv, StateId, Transition};
pub use error::{GfnError, Result};
