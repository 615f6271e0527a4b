pub mod boxes;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod head;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod pointcloud;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
