use thiserror::Error;

/// Errors raised by the simulation and optimization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("wavelength {0} um is outside the supported band [0.4, 0.7] um")]
    WavelengthOutOfBand(f64),

    #[error("radius {r} mm lies outside the surface (semi-diameter {semi_diameter} mm)")]
    OutsideAperture { r: f64, semi_diameter: f64 },

    #[error("surface sag is undefined at r = {0} mm")]
    SagUndefined(f64),

    #[error("ray bundle is empty: every ray was vignetted or failed")]
    EmptyBundle,

    #[error("landing points are degenerate (collinear or fewer than 3 rays)")]
    DegenerateLanding,

    #[error("{:.3}% of ray energy landed outside the transition grid (limit 1%)", .dropped * 100.0)]
    EnergyDropped { dropped: f64 },

    #[error("DOE window [{row0}, {col0}] + {rows}x{cols} exceeds the DOE grid {doe_rows}x{doe_cols}")]
    OutsideDoe {
        row0: isize,
        col0: isize,
        rows: usize,
        cols: usize,
        doe_rows: usize,
        doe_cols: usize,
    },

    #[error("chief ray does not propagate toward the sensor (dz = {0})")]
    BackwardChief(f64),

    #[error("PSF is not normalized (sum = {0})")]
    NotNormalized(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing PSF coverage for field angle {angle_deg:.3} deg")]
    MissingPsf { angle_deg: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
