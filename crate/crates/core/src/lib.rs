//! Kronecker-factored compression of Transformer encoders.
//!
//! Dense weights `W` are replaced by `A⊗B` and applied without reconstruction;
//! [`planner`] picks factor shapes and accounts parameters and FLOPs, [`nkp`]
//! initializes factors from a dense teacher, [`model`] runs dense and
//! Kronecker encoders side by side and [`distill`] trains a Kronecker student
//! against a dense teacher.

pub mod autograd;
pub mod bench;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod kron;
pub mod model;
pub mod nkp;
pub mod planner;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
pub use kron::KronFactorPair;
pub use planner::{ArchSpec, CompressionPlan, FactorShape};
pub use tensor::{Matrix, NamedTensorStore, Rng};
