//! Two-stage pedestrian detector with weak box-based segmentation infusion.

pub mod config;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod pipeline;
pub mod supervision;
pub mod synthdata;
pub mod tinynet;

pub use error::{Error, Result};
