//! Octree super-resolution of forest point clouds and downstream
//! forest-inventory analysis.

pub mod baseline;
pub mod cli;
pub mod error;
pub mod inventory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod octree;
pub mod pcio;
pub mod spatial;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
