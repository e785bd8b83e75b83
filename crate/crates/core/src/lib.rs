pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod offline;
pub mod online;
pub mod rng;

pub use error::{Error, Result};
