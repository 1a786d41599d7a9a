pub mod cli;
pub mod continual;
pub mod data;
pub mod encoder;
pub mod error;
pub mod io;
pub mod losses;
pub mod lowrank;
pub mod numerics;
pub mod run;

pub use error::{Error, Result};
pub use run::RunState;
