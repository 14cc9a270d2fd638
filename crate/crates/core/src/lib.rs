#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod error;
pub mod expr;
pub mod jump;
pub mod noise;
pub mod operators;
pub mod problem;
pub mod solver;
pub mod spectral;
pub mod stats;
pub mod verification;

pub use error::{ConfigErrorCode, Error, Result};
pub use jump::{JumpAtom, JumpCatalog};
pub use spectral::{FieldSampler, SpectralField, TorusGrid};
