pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod pairing;
pub mod pipeline;
pub mod refine;
pub(crate) mod raster;
pub mod scene;
pub mod viewdec;
pub mod tensor;

pub use error::{Error, Result};
