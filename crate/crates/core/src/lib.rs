pub mod augmentation;
pub mod checkpoint;
pub mod dataset;
pub mod decoding;
pub mod encoding;
pub mod evaluation;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod raster;
pub mod review;
pub mod training;

pub use error::{CaliperError, Result};
pub use geometry::{biometry_length, compute_biometry, BiometryPair, CaliperPoint, LandmarkSet, PixelSpacing, PlaneConfig};
pub use raster::Raster;
