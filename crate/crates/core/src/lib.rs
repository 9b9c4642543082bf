//! Hybrid refractive-diffractive optics simulation and DOE co-optimization.
//!
//! Units: lengths in mm, wavelengths in um, angles in radians.

pub mod error;
pub mod field;
pub mod fieldsynth;
pub mod model;
pub mod optimize;
pub mod raytrace;
pub mod render;
pub mod restore;
pub mod wave;

pub use error::{Error, Result};
pub use field::SampledField;
