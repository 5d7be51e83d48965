//! Two-stage radiographic damage scoring: patch extraction by abnormality
//! ranked tiling or landmark-based joint cropping, followed by gated
//! attention multiple-instance regression over patch features.

pub mod abmil;
pub mod augment;
pub mod bag;
pub mod classifier;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod foreground;
pub mod geometry;
pub mod image;
pub mod joints;
pub mod nn;
pub mod synthetic;
pub mod tiling;
pub mod training;

pub use error::{Error, Result};
