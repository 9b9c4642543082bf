//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use hybrid_optics::model::{read_doe, DoePlacement, DoeProfile, LensSystem};
use hybrid_optics::optimize::{EarlyStop, LossWeights, Objective, OptimizeConfig};
use hybrid_optics::wave::{default_response, OpticalSetup};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LensSpec {
    Thin {
        focal_length_mm: f64,
        f_number: f64,
    },
    /// TOML prescription file.
    File {
        path: PathBuf,
    },
    CookeTriplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoeSpec {
    /// Fraction of the principal-plane to sensor distance.
    pub s: f64,
    pub radial: bool,
    /// Start from a stored WFDOE instead of flat zero heights.
    pub path: Option<PathBuf>,
}

impl Default for DoeSpec {
    fn default() -> Self {
        Self {
            s: 0.25,
            radial: false,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsSpec {
    pub wavelengths_um: Vec<f64>,
    pub grid: usize,
    pub pitch_mm: f64,
    pub psf_size: usize,
}

impl Default for OpticsSpec {
    fn default() -> Self {
        Self {
            wavelengths_um: vec![0.55],
            grid: 256,
            pitch_mm: 0.006,
            psf_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSpec {
    pub angles_deg: Vec<f64>,
    pub depths_m: Vec<f64>,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            angles_deg: vec![0.0],
            depths_m: vec![f64::INFINITY],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPreset {
    FocusOnly,
    Imaging,
    ImageAndDepth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSpec {
    pub iterations: usize,
    pub angles_per_iteration: usize,
    pub lr: f64,
    pub anneal_start: usize,
    pub lr_floor: f64,
    pub levels: u32,
    pub weights: WeightPreset,
    pub dwa: bool,
    pub checkpoints: bool,
    pub early_stop_patience: Option<usize>,
    pub early_stop_min_delta: f64,
}

impl Default for OptimizeSpec {
    fn default() -> Self {
        let d = OptimizeConfig::default();
        Self {
            iterations: d.iterations,
            angles_per_iteration: d.angles_per_iteration,
            lr: d.lr,
            anneal_start: d.anneal_start,
            lr_floor: d.lr_floor,
            levels: d.levels,
            weights: WeightPreset::FocusOnly,
            dwa: d.dwa,
            checkpoints: false,
            early_stop_patience: None,
            early_stop_min_delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub s_list: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            s_list: vec![0.0, 0.1, 0.25, 0.4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSpec {
    /// WFIMG or PNG.
    pub frame: Option<PathBuf>,
    /// WFDEPTH in metres; a constant depth is used without it.
    pub depth: Option<PathBuf>,
    pub constant_depth_m: f64,
    /// Precomputed WFPSF stack; simulated from the optics otherwise.
    pub psf_stack: Option<PathBuf>,
    pub layers: usize,
    pub near_m: f64,
    pub far_m: f64,
    pub patch: usize,
    pub overlap: usize,
    /// Sensor pixel pitch used to assign field angles to patches; defaults to the optics pitch.
    pub pixel_pitch_mm: Option<f64>,
    pub noise_sigma: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            frame: None,
            depth: None,
            constant_depth_m: f64::INFINITY,
            psf_stack: None,
            layers: 6,
            near_m: 0.5,
            far_m: 100.0,
            patch: 256,
            overlap: 32,
            pixel_pitch_mm: None,
            noise_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeconvolveSpec {
    pub measurement: Option<PathBuf>,
    pub psf_stack: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub snr: f64,
    pub depth_m: f64,
}

impl Default for DeconvolveSpec {
    fn default() -> Self {
        Self {
            measurement: None,
            psf_stack: None,
            reference: None,
            snr: 100.0,
            depth_m: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub lens: LensSpec,
    #[serde(default)]
    pub doe: DoeSpec,
    #[serde(default)]
    pub optics: OpticsSpec,
    #[serde(default)]
    pub field: FieldSpec,
    #[serde(default)]
    pub optimize: OptimizeSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub render: RenderSpec,
    #[serde(default)]
    pub deconvolve: DeconvolveSpec,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Optional input: must exist when given.
pub fn check_file(p: Option<&PathBuf>) -> Result<(), CliError> {
    match p {
        Some(f) if !f.is_file() => Err(config_err(format!("referenced file {} does not exist", f.display()))),
        _ => Ok(()),
    }
}

/// Input the command cannot run without.
pub fn require_file<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf, CliError> {
    let f = p
        .as_ref()
        .ok_or_else(|| config_err(format!("{key} is required for this command")))?;
    check_file(Some(f))?;
    Ok(f)
}

impl ExperimentConfig {
    /// Parse and make every referenced path absolute relative to the config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        }
        .canonicalize()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        cfg.absolutize(&base);
        Ok(cfg)
    }

    fn absolutize(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        if let LensSpec::File { path } = &mut self.lens {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        fix(&mut self.doe.path);
        fix(&mut self.render.frame);
        fix(&mut self.render.depth);
        fix(&mut self.render.psf_stack);
        fix(&mut self.deconvolve.measurement);
        fix(&mut self.deconvolve.psf_stack);
        fix(&mut self.deconvolve.reference);
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.field.angles_deg.is_empty() {
            return Err(config_err("field.angles_deg must not be empty"));
        }
        if self.field.depths_m.is_empty() {
            return Err(config_err("field.depths_m must not be empty"));
        }
        if let Some(a) = self
            .field
            .angles_deg
            .iter()
            .find(|a| !(a.is_finite() && a.abs() < 90.0))
        {
            return Err(config_err(format!("field angle {a} deg is outside (-90, 90)")));
        }
        if let Some(d) = self.field.depths_m.iter().find(|d| !(**d > 0.0)) {
            return Err(config_err(format!("depth {d} m must be positive")));
        }
        if self.optics.wavelengths_um.is_empty() {
            return Err(config_err("optics.wavelengths_um must not be empty"));
        }
        if !(0.0..1.0).contains(&self.doe.s) {
            return Err(config_err(format!("doe.s = {} must lie in [0, 1)", self.doe.s)));
        }
        if let Some(s) = self.sweep.s_list.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(config_err(format!("sweep s = {s} must lie in [0, 1)")));
        }
        let lens_file = match &self.lens {
            LensSpec::File { path } => Some(path),
            _ => None,
        };
        for f in [lens_file, self.doe.path.as_ref()] {
            check_file(f)?;
        }
        Ok(())
    }

    pub fn lens(&self) -> Result<LensSystem, CliError> {
        Ok(match &self.lens {
            LensSpec::Thin {
                focal_length_mm,
                f_number,
            } => LensSystem::thin_lens(*focal_length_mm, *f_number)?,
            LensSpec::File { path } => LensSystem::load(path)?,
            LensSpec::CookeTriplet => LensSystem::cooke_triplet_standin(),
        })
    }

    pub fn setup(&self, s: f64) -> Result<OpticalSetup, CliError> {
        let mut setup = OpticalSetup::new(
            self.lens()?,
            DoePlacement::new(s)?,
            self.optics.grid,
            self.optics.pitch_mm,
        )?;
        setup.psf_size = self.optics.psf_size;
        setup.validate()?;
        Ok(setup)
    }

    /// Stored DOE, or flat zero heights covering every configured field angle.
    pub fn initial_doe(&self, setup: &OpticalSetup) -> Result<DoeProfile, CliError> {
        match &self.doe.path {
            Some(p) => Ok(read_doe(std::io::BufReader::new(std::fs::File::open(p)?))?),
            None => {
                let max = self.field.angles_deg.iter().fold(0.0f64, |m, a| m.max(a.abs()));
                Ok(setup.doe_for_angles(max.to_radians(), self.doe.radial)?)
            }
        }
    }

    /// One channel per wavelength for a single wavelength, RGB otherwise.
    pub fn response(&self) -> Array2<f64> {
        let wl = &self.optics.wavelengths_um;
        if wl.len() == 1 {
            Array2::ones((1, 1))
        } else {
            default_response(wl)
        }
    }

    pub fn optimize_config(&self, checkpoint_dir: Option<PathBuf>) -> OptimizeConfig {
        let o = &self.optimize;
        OptimizeConfig {
            angles: self.field.angles_deg.iter().map(|a| a.to_radians()).collect(),
            depths: self.field.depths_m.iter().map(|d| d * 1e3).collect(),
            objective: Objective {
                wavelengths: self.optics.wavelengths_um.clone(),
                response: self.response(),
                target: None,
            },
            weights: match o.weights {
                WeightPreset::FocusOnly => LossWeights::focus_only(),
                WeightPreset::Imaging => LossWeights::imaging(),
                WeightPreset::ImageAndDepth => LossWeights::image_and_depth(),
            },
            dwa: o.dwa,
            iterations: o.iterations,
            angles_per_iteration: o.angles_per_iteration,
            lr: o.lr,
            anneal_start: o.anneal_start,
            lr_floor: o.lr_floor,
            levels: o.levels,
            seed: self.seed,
            early_stop: o.early_stop_patience.map(|patience| EarlyStop {
                patience,
                min_delta: o.early_stop_min_delta,
            }),
            checkpoint_dir: if o.checkpoints { checkpoint_dir } else { None },
            ..OptimizeConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [lens]
        kind = "thin"
        focal_length_mm = 10.0
        f_number = 12.0
    "#;

    #[test]
    fn defaults_fill_in() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.field.depths_m, vec![f64::INFINITY]);
        assert_eq!(cfg.optimize.iterations, 300);
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.field.angles_deg = vec![0.0, 12.0, 20.0];
        cfg.optimize.weights = WeightPreset::Imaging;
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_messages() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.field.angles_deg.clear();
        assert!(matches!(cfg.validate(), Err(CliError::Config(m)) if m.contains("angles_deg")));
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.sweep.s_list = vec![0.0, 1.0];
        assert!(matches!(cfg.validate(), Err(CliError::Config(m)) if m.contains("sweep s = 1")));
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.doe.path = Some("/nonexistent/doe.wfdoe".into());
        assert!(matches!(cfg.validate(), Err(CliError::Config(m)) if m.contains("does not exist")));
        assert!(matches!(require_file(&None, "render.frame"), Err(CliError::Config(m)) if m.contains("render.frame")));
        assert!(toml::from_str::<ExperimentConfig>(
            "[lens]\nkind = \"thin\"\nfocal_length_mm = 1\nf_number = 2\nbogus = 1"
        )
        .is_err());
    }
}
