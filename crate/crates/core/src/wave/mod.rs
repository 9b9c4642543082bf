//! Scalar wave propagation from the transition plane to the sensor.

pub mod asm;
pub mod psf;

pub use asm::{
    asm_propagate, asm_propagate_to, band_limit, compensate, spectrum_center_centroid, spectrum_center_from_chief,
    AsmKernel,
};
pub use psf::{
    combine_spectral, default_response, doe_window, gaussian_response, incident_field, plan, propagate_two_step, psf,
    psf_lattice, read_psf_stack, spectral_psf, write_psf_stack, ForwardState, OpticalSetup, PreparedPath,
    PropagationPlan, Psf, PsfRecord, SpectralPsf, DEFAULT_WAVELENGTHS,
};

#[cfg(test)]
mod tests;
