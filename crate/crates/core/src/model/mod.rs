//! Lens prescriptions, materials and diffractive elements.

pub mod doe;
pub mod material;
pub mod surface;
pub mod system;

pub use doe::{read_doe, write_doe, DoeGradient, DoeHeights, DoePlacement, DoeProfile, DoeWindow};
pub use material::{Material, BAND, NOMINAL_WAVELENGTH};
pub use surface::{Surface, SurfaceKind};
pub use system::{LensMode, LensSystem, ParaxialData};
