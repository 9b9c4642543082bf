use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    Plane,
    Sphere,
    Asphere,
    Stop,
}

/// Rotationally symmetric refracting surface or aperture stop.
///
/// Sag follows the even-asphere form
/// `c r^2 / (1 + sqrt(1 - (1 + k) c^2 r^2)) + sum_i a_i r^(2i)` with
/// `aspheric[0]` multiplying `r^2`, `aspheric[1]` multiplying `r^4`, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub kind: SurfaceKind,
    /// Vertex position on the optical axis, mm.
    pub z: f64,
    /// 1/mm.
    #[serde(default)]
    pub curvature: f64,
    #[serde(default)]
    pub conic: f64,
    #[serde(default)]
    pub aspheric: Vec<f64>,
    pub semi_diameter: f64,
}

impl Surface {
    pub fn plane(z: f64, semi_diameter: f64) -> Self {
        Self {
            kind: SurfaceKind::Plane,
            z,
            curvature: 0.0,
            conic: 0.0,
            aspheric: Vec::new(),
            semi_diameter,
        }
    }

    pub fn stop(z: f64, semi_diameter: f64) -> Self {
        Self {
            kind: SurfaceKind::Stop,
            ..Self::plane(z, semi_diameter)
        }
    }

    pub fn sphere(z: f64, curvature: f64, semi_diameter: f64) -> Self {
        Self {
            kind: SurfaceKind::Sphere,
            curvature,
            ..Self::plane(z, semi_diameter)
        }
    }

    pub fn asphere(z: f64, curvature: f64, conic: f64, aspheric: Vec<f64>, semi_diameter: f64) -> Self {
        Self {
            kind: SurfaceKind::Asphere,
            z,
            curvature,
            conic,
            aspheric,
            semi_diameter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.semi_diameter > 0.0) {
            return invalid(format!("semi_diameter must be > 0, got {}", self.semi_diameter));
        }
        match self.kind {
            SurfaceKind::Plane | SurfaceKind::Stop => {
                if self.curvature != 0.0 || self.conic != 0.0 || self.aspheric.iter().any(|&a| a != 0.0) {
                    return invalid("plane and stop surfaces must be flat");
                }
            }
            SurfaceKind::Sphere => {
                if self.aspheric.iter().any(|&a| a != 0.0) {
                    return invalid("sphere surfaces cannot carry aspheric coefficients");
                }
            }
            SurfaceKind::Asphere => {}
        }
        // sag must be single valued across the clear aperture
        let r = self.semi_diameter;
        if self.sag_unchecked(r).is_none() {
            return invalid(format!(
                "surface at z = {} is undefined at its semi-diameter {}",
                self.z, r
            ));
        }
        Ok(())
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.kind, SurfaceKind::Plane | SurfaceKind::Stop)
    }

    /// Closed-form intersection applies (flat, or a pure sphere).
    pub(crate) fn is_simple_sphere(&self) -> bool {
        self.kind == SurfaceKind::Sphere && self.conic == 0.0
    }

    pub fn sag(&self, r: f64) -> Result<f64> {
        if r.abs() > self.semi_diameter {
            return Err(Error::OutsideAperture {
                r,
                semi_diameter: self.semi_diameter,
            });
        }
        self.sag_unchecked(r).ok_or(Error::SagUndefined(r))
    }

    pub(crate) fn sag_unchecked(&self, r: f64) -> Option<f64> {
        if self.is_flat() {
            return Some(0.0);
        }
        let c = self.curvature;
        let r2 = r * r;
        let arg = 1.0 - (1.0 + self.conic) * c * c * r2;
        if arg < 0.0 {
            return None;
        }
        let mut s = c * r2 / (1.0 + arg.sqrt());
        let mut rp = r2;
        for &a in &self.aspheric {
            s += a * rp;
            rp *= r2;
        }
        Some(s)
    }

    /// d(sag)/dr.
    pub(crate) fn sag_slope(&self, r: f64) -> Option<f64> {
        if self.is_flat() {
            return Some(0.0);
        }
        let c = self.curvature;
        let arg = 1.0 - (1.0 + self.conic) * c * c * r * r;
        if arg <= 0.0 {
            return None;
        }
        let mut d = c * r / arg.sqrt();
        let mut rp = r; // r^(2i-1)
        for (i, &a) in self.aspheric.iter().enumerate() {
            d += 2.0 * (i + 1) as f64 * a * rp;
            rp *= r * r;
        }
        Some(d)
    }

    /// Paraxial curvature, including the r^2 aspheric term.
    pub fn paraxial_curvature(&self) -> f64 {
        if self.is_flat() {
            return 0.0;
        }
        self.curvature + 2.0 * self.aspheric.first().copied().unwrap_or(0.0)
    }
}

pub fn sag(surface: &Surface, r: f64) -> Result<f64> {
    surface.sag(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_sag_is_zero() {
        let s = Surface::plane(3.0, 5.0);
        for r in [0.0, 1.0, 4.99] {
            assert_eq!(s.sag(r).unwrap(), 0.0);
        }
    }

    #[test]
    fn sphere_sag_reference() {
        // c = 0.01, r = 1, 40-digit evaluation: 0.005000125006250390652...
        // (equivalently R - sqrt(R^2 - r^2) with R = 100)
        let s = Surface::sphere(0.0, 0.01, 10.0);
        let v = s.sag(1.0).unwrap();
        assert!((v - 0.005_000_125_006_250_390_65).abs() < 1e-15, "{v}");
        assert_eq!(s.sag(0.0).unwrap(), 0.0);
    }

    #[test]
    fn asphere_adds_polynomial() {
        let base = Surface::sphere(0.0, 0.02, 5.0);
        let asph = Surface::asphere(0.0, 0.02, 0.0, vec![0.0, 1e-4, -2e-6], 5.0);
        let r: f64 = 2.0;
        let expect = base.sag(r).unwrap() + 1e-4 * r.powi(4) - 2e-6 * r.powi(6);
        assert!((asph.sag(r).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn slope_matches_finite_difference() {
        let s = Surface::asphere(0.0, 0.05, -0.7, vec![1e-3, 2e-4, -1e-6], 4.0);
        for r in [0.3, 1.1, 2.7] {
            let h = 1e-6;
            let fd = (s.sag(r + h).unwrap() - s.sag(r - h).unwrap()) / (2.0 * h);
            assert!((fd - s.sag_slope(r).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn sag_errors() {
        let s = Surface::sphere(0.0, 0.5, 1.9);
        assert!(matches!(s.sag(2.5), Err(Error::OutsideAperture { .. })));
        // radius 2 sphere is undefined beyond r = 2
        let wide = Surface {
            semi_diameter: 3.0,
            ..s.clone()
        };
        assert!(matches!(wide.sag(2.5), Err(Error::SagUndefined(_))));
        assert!(wide.validate().is_err());
    }
}
