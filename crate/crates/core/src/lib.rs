pub mod channel;
pub mod error;
pub mod fem;
pub mod io;
pub mod linsolve;
pub mod mesh;
pub mod mms;
pub mod scheme;

pub use error::{Error, Result};
