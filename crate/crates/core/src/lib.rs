//! Transfer of annotation polygons between registered whole-slide images,
//! tile manifest construction, and slide-level evaluation of tile
//! predictions.

pub mod config;
pub mod deform;
pub mod error;
pub mod geojson;
pub mod metrics;
pub mod model;
pub mod morph;
pub mod raster;
pub mod rng;
pub mod split;
pub mod stats;
pub mod synth;
pub mod tissue;

pub use error::{Error, Result};
pub use model::{AnnotationSet, CaseRecord, ClassLabel, PointUm, Polygon, Region};
