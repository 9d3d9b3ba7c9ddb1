pub mod bbox;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod observations;
pub mod pipeline;
pub mod rle;
pub mod synthetic;
pub mod tracker;

pub use bbox::BBox;
pub use error::{Error, Result};
pub use rle::RleMask;
