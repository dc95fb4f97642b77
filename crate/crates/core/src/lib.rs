pub mod archive;
pub mod backend;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod interactive;
pub mod mask;
pub mod pipeline;
pub mod raster;
pub mod seed;
pub mod tta;

pub use error::{Error, Result};
