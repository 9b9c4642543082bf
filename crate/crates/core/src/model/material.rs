use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nominal design wavelength in um.
pub const NOMINAL_WAVELENGTH: f64 = 0.55;

/// Supported wavelength band in um.
pub const BAND: (f64, f64) = (0.4, 0.7);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispersionModel {
    Constant,
    Cauchy,
}

/// Optical medium. The Cauchy model is anchored so that `n(NOMINAL_WAVELENGTH) == n0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub model: DispersionModel,
    pub n0: f64,
    /// Cauchy B in um^2.
    #[serde(default)]
    pub cauchy_b: f64,
    /// Cauchy C in um^4.
    #[serde(default)]
    pub cauchy_c: f64,
}

impl Material {
    pub fn air() -> Self {
        Self::constant(1.0)
    }

    pub fn constant(n0: f64) -> Self {
        Self {
            model: DispersionModel::Constant,
            n0,
            cauchy_b: 0.0,
            cauchy_c: 0.0,
        }
    }

    pub fn cauchy(n0: f64, b: f64, c: f64) -> Self {
        Self {
            model: DispersionModel::Cauchy,
            n0,
            cauchy_b: b,
            cauchy_c: c,
        }
    }

    /// PMMA at 550 nm.
    pub fn pmma() -> Self {
        Self::constant(1.492)
    }

    /// Fused silica, Cauchy fit around the visible band.
    pub fn fused_silica() -> Self {
        Self::cauchy(1.4599, 0.00354, 0.0)
    }

    pub fn refractive_index(&self, wavelength: f64) -> Result<f64> {
        if !(BAND.0..=BAND.1).contains(&wavelength) {
            return Err(Error::WavelengthOutOfBand(wavelength));
        }
        Ok(self.index_unchecked(wavelength))
    }

    pub(crate) fn index_unchecked(&self, wavelength: f64) -> f64 {
        match self.model {
            DispersionModel::Constant => self.n0,
            DispersionModel::Cauchy => {
                let l0 = NOMINAL_WAVELENGTH;
                let a = self.n0 - self.cauchy_b / (l0 * l0) - self.cauchy_c / l0.powi(4);
                a + self.cauchy_b / (wavelength * wavelength) + self.cauchy_c / wavelength.powi(4)
            }
        }
    }

    pub fn is_air(&self) -> bool {
        self.model == DispersionModel::Constant && self.n0 == 1.0
    }
}

pub fn refractive_index(material: &Material, wavelength: f64) -> Result<f64> {
    material.refractive_index(wavelength)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_pmma() {
        for l in [0.45, 0.55, 0.65] {
            assert_eq!(Material::pmma().refractive_index(l).unwrap(), 1.492);
        }
    }

    #[test]
    fn air_is_unity() {
        assert_eq!(Material::air().refractive_index(0.55).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_cauchy_is_flat() {
        let m = Material::cauchy(1.5, 0.0, 0.0);
        for l in [0.4, 0.5, 0.7] {
            assert_eq!(m.refractive_index(l).unwrap(), 1.5);
        }
    }

    #[test]
    fn cauchy_is_anchored_and_normal() {
        let m = Material::fused_silica();
        assert!((m.refractive_index(0.55).unwrap() - 1.4599).abs() < 1e-15);
        assert!(m.refractive_index(0.45).unwrap() > m.refractive_index(0.65).unwrap());
    }

    #[test]
    fn out_of_band() {
        assert!(matches!(
            Material::pmma().refractive_index(0.8),
            Err(Error::WavelengthOutOfBand(_))
        ));
    }
}
