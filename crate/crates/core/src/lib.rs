pub mod align;
pub mod bench;
pub mod encoder;
pub mod error;
pub mod grammar;
pub mod io;
pub mod nn;
pub mod pairs;
pub mod rng;
pub mod scene;
pub mod vocab;

pub use error::{CoreError, Result};
