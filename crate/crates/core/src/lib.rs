pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod concepts;
pub mod corpus;
pub mod decoder;
pub mod embedding;
pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod testbed;
pub mod train;
pub mod vocab;

pub use error::{Error, ErrorKind, Result};
