//! Dense matrices, seeded randomness and the `KTS1` tensor store.

mod matrix;
mod rng;
mod store;

pub(crate) use matrix::dot;
pub use matrix::Matrix;
pub use rng::Rng;
pub use store::{Dtype, NamedTensorStore, MAGIC};
