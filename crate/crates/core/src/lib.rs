//! Desk-scale laboratory for the reversibility of machine unlearning.

pub mod corpus;
pub mod diagnostics;
pub mod dump;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod protocols;
pub mod regimes;
pub mod seed;

pub use error::{Error, ErrorKind, Result};
