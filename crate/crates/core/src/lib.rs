pub mod design;
pub mod error;
pub mod fracpoly;
pub mod green;
pub mod harness;
pub mod linalg;
pub mod linearization;
pub mod matching;
pub mod report;
pub mod suite;
pub mod system;

pub use error::{Error, Result};
