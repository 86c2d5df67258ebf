pub mod dsp;
pub mod abcd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod nsf;
pub mod params;
pub mod remez;
pub mod reservoir;
pub mod training;

pub use error::{Error, Result};
