pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;

pub mod threads;

pub use error::{Error, Result};
