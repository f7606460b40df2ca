//! Speech-driven 3D talking-head animation with style/content disentanglement.

pub mod audio;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod study;
pub mod training;

pub use error::{Error, Result};
