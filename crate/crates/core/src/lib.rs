//! System identification from invariant measures.

pub mod adjoint;
pub mod cli;
pub mod delay;
pub mod error;
pub mod fvm;
pub mod io;
pub mod linalg;
pub mod measure;
pub mod optim;
pub mod pfo;
pub mod systems;
pub mod velocity;

pub use error::{Error, Result};
