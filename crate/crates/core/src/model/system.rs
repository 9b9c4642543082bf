use std::path::Path;

use serde::{Deserialize, Serialize};

use super::material::Material;
use super::surface::{Surface, SurfaceKind};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensMode {
    /// Sequential ray tracing through every surface.
    Traced,
    /// Ideal lens at z = 0 modelled by a wavelength-dependent quadratic phase.
    ThinLens,
}

/// Ordered refracting surfaces with the medium that follows each one.
/// Object space is air.
#[derive(Debug, Clone, PartialEq)]
pub struct LensSystem {
    pub surfaces: Vec<Surface>,
    /// `media[i]` fills the space between surface `i` and surface `i + 1`.
    pub media: Vec<Material>,
    pub stop_index: usize,
    /// Backplane of the lens module; ray optics hands over to wave optics here.
    pub transition_plane_z: f64,
    pub mode: LensMode,
    /// Focal length in mm, used in thin-lens mode only.
    pub focal_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SurfaceBlock {
    #[serde(flatten)]
    surface: Surface,
    medium: Material,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PrescriptionFile {
    mode: LensMode,
    stop_index: usize,
    transition_plane_z: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    focal_length: Option<f64>,
    surface: Vec<SurfaceBlock>,
}

/// Result of a paraxial (first-order) trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParaxialData {
    pub effective_focal_length: f64,
    pub back_focal_z: f64,
    /// Rear principal plane.
    pub principal_z: f64,
}

impl LensSystem {
    pub fn new(
        surfaces: Vec<Surface>,
        media: Vec<Material>,
        stop_index: usize,
        transition_plane_z: f64,
    ) -> Result<Self> {
        let sys = Self {
            surfaces,
            media,
            stop_index,
            transition_plane_z,
            mode: LensMode::Traced,
            focal_length: None,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// Ideal thin lens of focal length `f` (mm) at z = 0 with its stop in the lens plane.
    pub fn thin_lens(focal_length: f64, f_number: f64) -> Result<Self> {
        if !(focal_length > 0.0 && f_number > 0.0) {
            return invalid("thin lens needs positive focal length and f-number");
        }
        let sys = Self {
            surfaces: vec![Surface::stop(0.0, focal_length / (2.0 * f_number))],
            media: vec![Material::air()],
            stop_index: 0,
            transition_plane_z: 0.0,
            mode: LensMode::ThinLens,
            focal_length: Some(focal_length),
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        if self.surfaces.is_empty() {
            return invalid("lens system has no surfaces");
        }
        if self.media.len() != self.surfaces.len() {
            return invalid("one medium is required after every surface");
        }
        for s in &self.surfaces {
            s.validate()?;
        }
        for w in self.surfaces.windows(2) {
            if !(w[1].z > w[0].z) {
                return invalid("surface axial positions must be strictly increasing");
            }
        }
        let stops: Vec<usize> = self
            .surfaces
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == SurfaceKind::Stop)
            .map(|(i, _)| i)
            .collect();
        if stops != [self.stop_index] {
            return invalid(format!(
                "exactly one stop expected at index {}, found stops at {:?}",
                self.stop_index, stops
            ));
        }
        let last = self.surfaces.last().expect("non-empty").z;
        if self.transition_plane_z < last {
            return invalid("transition plane must lie behind the last surface");
        }
        if !self.media.last().expect("non-empty").is_air() {
            return invalid("image space must be air");
        }
        if self.mode == LensMode::ThinLens {
            match self.focal_length {
                Some(f) if f > 0.0 => {}
                _ => return invalid("thin-lens mode requires a positive focal_length"),
            }
        }
        Ok(())
    }

    pub fn stop(&self) -> &Surface {
        &self.surfaces[self.stop_index]
    }

    /// Medium in front of surface `i`.
    pub fn medium_before(&self, i: usize) -> Material {
        if i == 0 {
            Material::air()
        } else {
            self.media[i - 1].clone()
        }
    }

    /// First-order properties at `wavelength`.
    pub fn paraxial(&self, wavelength: f64) -> Result<ParaxialData> {
        if self.mode == LensMode::ThinLens {
            let f = self.focal_length.expect("validated");
            return Ok(ParaxialData {
                effective_focal_length: f,
                back_focal_z: f,
                principal_z: 0.0,
            });
        }
        // marginal ray parallel to the axis, unit height
        let (y, u) = self.paraxial_trace(1.0, 0.0, wavelength)?;
        if u == 0.0 {
            return invalid("afocal system has no focal length");
        }
        let efl = -1.0 / u;
        let last = self.surfaces.last().expect("non-empty").z;
        let back_focal_z = last - y / u;
        Ok(ParaxialData {
            effective_focal_length: efl,
            back_focal_z,
            principal_z: back_focal_z - efl,
        })
    }

    /// Paraxial image position for an on-axis object `distance` mm in front of the first surface.
    /// Thin-lens mode measures the distance from the lens plane.
    pub fn paraxial_image_z(&self, distance: f64, wavelength: f64) -> Result<f64> {
        if self.mode == LensMode::ThinLens {
            let f = self.focal_length.expect("validated");
            if distance.is_infinite() {
                return Ok(f);
            }
            if distance <= f {
                return invalid("object inside the focal length forms no real image");
            }
            return Ok(1.0 / (1.0 / f - 1.0 / distance));
        }
        let (y, u) = if distance.is_infinite() {
            self.paraxial_trace(1.0, 0.0, wavelength)?
        } else {
            let u0 = 1e-3;
            self.paraxial_trace(u0 * distance, u0, wavelength)?
        };
        if u >= 0.0 {
            return invalid("object forms no real image");
        }
        Ok(self.surfaces.last().expect("non-empty").z - y / u)
    }

    /// y-nu trace from the first vertex to the last; returns height and angle after the last surface.
    fn paraxial_trace(&self, mut y: f64, mut u: f64, wavelength: f64) -> Result<(f64, f64)> {
        let mut n = 1.0;
        let mut z = self.surfaces[0].z;
        for (i, s) in self.surfaces.iter().enumerate() {
            y += u * (s.z - z);
            z = s.z;
            let n2 = self.media[i].refractive_index(wavelength)?;
            let power = s.paraxial_curvature() * (n2 - n);
            u = (n * u - y * power) / n2;
            n = n2;
        }
        Ok((y, u))
    }

    pub fn to_toml(&self) -> Result<String> {
        let file = PrescriptionFile {
            mode: self.mode,
            stop_index: self.stop_index,
            transition_plane_z: self.transition_plane_z,
            focal_length: self.focal_length,
            surface: self
                .surfaces
                .iter()
                .zip(&self.media)
                .map(|(s, m)| SurfaceBlock {
                    surface: s.clone(),
                    medium: m.clone(),
                })
                .collect(),
        };
        toml::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: PrescriptionFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let (surfaces, media) = file.surface.into_iter().map(|b| (b.surface, b.medium)).unzip();
        let sys = Self {
            surfaces,
            media,
            stop_index: file.stop_index,
            transition_plane_z: file.transition_plane_z,
            mode: file.mode,
            focal_length: file.focal_length,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Stand-in Cooke triplet (not a published prescription): stop in front,
    /// aspheric first surface, EFL near 35 mm.
    pub fn cooke_triplet_standin() -> Self {
        let glass_crown = Material::cauchy(1.5168, 0.00420, 0.0);
        let glass_flint = Material::cauchy(1.6200, 0.00880, 0.0);
        let surfaces = vec![
            Surface::stop(0.0, 1.5),
            Surface::asphere(1.0, 1.0 / 7.518, 0.0, vec![0.0, -2.0e-5], 3.0),
            Surface::sphere(1.7, -1.0 / 43.435, 3.0),
            Surface::sphere(3.8, -1.0 / 6.685, 3.0),
            Surface::sphere(4.15, 1.0 / 7.7, 3.0),
            Surface::sphere(5.655, 1.0 / 115.115, 3.0),
            Surface::sphere(7.055, -1.0 / 5.845, 3.0),
        ];
        let media = vec![
            Material::air(),
            glass_crown.clone(),
            Material::air(),
            glass_flint,
            Material::air(),
            glass_crown,
            Material::air(),
        ];
        Self {
            surfaces,
            media,
            stop_index: 0,
            transition_plane_z: 7.5,
            mode: LensMode::Traced,
            focal_length: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn singlet() -> LensSystem {
        LensSystem::new(
            vec![
                Surface::stop(0.0, 2.0),
                Surface::sphere(1.0, 1.0 / 50.0, 5.0),
                Surface::sphere(3.0, -1.0 / 50.0, 5.0),
            ],
            vec![Material::air(), Material::constant(1.5), Material::air()],
            0,
            3.0,
        )
        .unwrap()
    }

    #[test]
    fn prescription_round_trip() {
        for sys in [
            singlet(),
            LensSystem::cooke_triplet_standin(),
            LensSystem::thin_lens(35.0, 12.0).unwrap(),
        ] {
            let text = sys.to_toml().unwrap();
            let back = LensSystem::from_toml(&text).unwrap();
            assert_eq!(back, sys, "{text}");
        }
    }

    #[test]
    fn validation_rejects_bad_systems() {
        let mut s = singlet();
        s.surfaces[2].z = 0.5;
        assert!(s.validate().is_err());
        let mut s = singlet();
        s.transition_plane_z = 2.0;
        assert!(s.validate().is_err());
        let mut s = singlet();
        s.surfaces[1].kind = SurfaceKind::Stop;
        s.surfaces[1].curvature = 0.0;
        assert!(s.validate().is_err());
        let mut s = LensSystem::thin_lens(35.0, 12.0).unwrap();
        s.focal_length = None;
        assert!(s.validate().is_err());
    }

    #[test]
    fn lensmaker_focal_length() {
        let p = singlet().paraxial(0.55).unwrap();
        // 1/f = (n-1)(c1 - c2 + (n-1) d c1 c2 / n)
        let (n, c1, c2, d): (f64, f64, f64, f64) = (1.5, 0.02, -0.02, 2.0);
        let f = 1.0 / ((n - 1.0) * (c1 - c2 + (n - 1.0) * d * c1 * c2 / n));
        assert!((p.effective_focal_length - f).abs() < 1e-9);
        assert!(p.principal_z > 1.0 && p.principal_z < 3.0);
    }

    #[test]
    fn triplet_standin_is_reasonable() {
        let t = LensSystem::cooke_triplet_standin();
        t.validate().unwrap();
        let p = t.paraxial(0.55).unwrap();
        assert!(
            p.effective_focal_length > 25.0 && p.effective_focal_length < 45.0,
            "{p:?}"
        );
        assert!(p.back_focal_z > t.transition_plane_z);
    }

    #[test]
    fn thin_lens_image_distance() {
        let t = LensSystem::thin_lens(35.0, 12.0).unwrap();
        assert_eq!(t.paraxial_image_z(f64::INFINITY, 0.55).unwrap(), 35.0);
        let v = t.paraxial_image_z(1400.0, 0.55).unwrap();
        assert!((1.0 / v + 1.0 / 1400.0 - 1.0 / 35.0).abs() < 1e-15);
    }
}
