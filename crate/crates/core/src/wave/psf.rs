use std::io::{BufRead, Write};

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;

use super::asm::{spectrum_center_from_chief, AsmKernel};
use crate::error::{invalid, Error, Result};
use crate::field::{centre_offset, parse_token, SampledField};
use crate::fieldsynth::{assemble, GridSpec};
use crate::model::{DoeGradient, DoePlacement, DoeProfile, DoeWindow, LensMode, LensSystem, NOMINAL_WAVELENGTH};
use crate::raytrace::{chief_ray, thin_lens_field, trace_system, PupilSampling, Ray, Source};

/// Everything between the source and the sensor.
#[derive(Debug, Clone)]
pub struct OpticalSetup {
    pub system: LensSystem,
    pub placement: DoePlacement,
    /// Sensor plane, mm.
    pub sensor_z: f64,
    /// Simulation window side (samples) for every plane.
    pub grid: usize,
    /// Sample pitch shared by every plane and the DOE, mm.
    pub pitch: f64,
    /// Side of the PSF crop taken around the chief landing cell.
    pub psf_size: usize,
    pub pupil: PupilSampling,
}

impl OpticalSetup {
    /// Sensor at the paraxial focus for an object at infinity (nominal wavelength).
    pub fn new(system: LensSystem, placement: DoePlacement, grid: usize, pitch: f64) -> Result<Self> {
        system.validate()?;
        let sensor_z = system.paraxial_image_z(f64::INFINITY, NOMINAL_WAVELENGTH)?;
        let setup = Self {
            system,
            placement,
            sensor_z,
            grid,
            pitch,
            psf_size: grid,
            pupil: PupilSampling::default(),
        };
        setup.validate()?;
        Ok(setup)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.psf_size < 2 || self.psf_size > self.grid {
            return invalid(format!(
                "grid {} / PSF size {} must satisfy 2 <= psf <= grid",
                self.grid, self.psf_size
            ));
        }
        if !(self.pitch > 0.0) {
            return invalid("pitch must be positive");
        }
        if self.doe_z()? < self.transition_z() {
            return invalid("DOE placement falls inside the lens module");
        }
        Ok(())
    }

    pub fn transition_z(&self) -> f64 {
        self.system.transition_plane_z
    }

    pub fn principal_z(&self) -> Result<f64> {
        Ok(self.system.paraxial(NOMINAL_WAVELENGTH)?.principal_z)
    }

    /// Axial position of the DOE, mm.
    pub fn doe_z(&self) -> Result<f64> {
        Ok(self.placement.resolve(self.principal_z()?, self.sensor_z))
    }

    /// Field point at `angle` radians and `depth` mm (infinite for a plane wave).
    pub fn source(&self, angle: f64, depth: f64) -> Source {
        Source::field(angle, depth, self.system.stop().z)
    }

    /// Axis-centred DOE grid matching this setup's sampling, large enough for every window
    /// up to `max_angle`.
    pub fn doe_for_angles(&self, max_angle: f64, radial: bool) -> Result<DoeProfile> {
        let doe_z = self.doe_z()?;
        let along = (doe_z - self.system.stop().z).max(0.0) * max_angle.tan();
        let half = (along / self.pitch).ceil() as usize + self.grid / 2 + 2;
        let substrate = crate::model::Material::pmma();
        Ok(if radial {
            let n = ((half as f64) * std::f64::consts::SQRT_2).ceil() as usize + 2;
            DoeProfile::zeros_radial(n, self.pitch, substrate, doe_z)
        } else {
            DoeProfile::zeros_grid(2 * half + 1, 2 * half + 1, self.pitch, substrate, doe_z)
        })
    }
}

/// Geometry of one two-step propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationPlan {
    /// Transition plane to DOE, mm.
    pub z1: f64,
    /// DOE to sensor, mm.
    pub z2: f64,
    /// Carrier stripped from every plane, cycles/mm.
    pub spectrum_center: (f64, f64),
    pub transition_origin: (f64, f64),
    pub doe_window: DoeWindow,
    pub doe_origin: (f64, f64),
    /// Centre of the sensor window, mm.
    pub sensor_origin: (f64, f64),
    pub wavelength: f64,
}

fn snap(x: f64, pitch: f64) -> isize {
    (x / pitch).round() as isize
}

/// Window geometry from the chief ray traced at the nominal wavelength; carrier at `wavelength`.
pub fn plan(setup: &OpticalSetup, source: &Source, wavelength: f64) -> Result<PropagationPlan> {
    let chief0 = chief_ray(&setup.system, source, NOMINAL_WAVELENGTH)?;
    let chief = if wavelength == NOMINAL_WAVELENGTH {
        chief0
    } else {
        chief_ray(&setup.system, source, wavelength)?
    };
    if !(chief0.dir[2] > 0.0) {
        return Err(Error::BackwardChief(chief0.dir[2]));
    }
    let spectrum_center = spectrum_center_from_chief(chief.dir, wavelength)?;
    let zt = setup.transition_z();
    let zd = setup.doe_z()?;
    let p = setup.pitch;
    let transition_origin = match setup.system.mode {
        LensMode::ThinLens => (0.0, 0.0),
        LensMode::Traced => (
            snap(chief0.origin[0], p) as f64 * p,
            snap(chief0.origin[1], p) as f64 * p,
        ),
    };
    let at = |z: f64| landing(&chief0, z);
    let d = at(zd);
    let centre = (snap(d.1, p), snap(d.0, p));
    let s = at(setup.sensor_z);
    let sensor_origin = (snap(s.0, p) as f64 * p, snap(s.1, p) as f64 * p);
    Ok(PropagationPlan {
        z1: zd - zt,
        z2: setup.sensor_z - zd,
        spectrum_center,
        transition_origin,
        doe_window: DoeWindow {
            centre,
            rows: setup.grid,
            cols: setup.grid,
        },
        doe_origin: (centre.1 as f64 * p, centre.0 as f64 * p),
        sensor_origin,
        wavelength,
    })
}

/// Chief-ray (x, y) at axial position `z`.
fn landing(chief: &Ray, z: f64) -> (f64, f64) {
    let t = (z - chief.origin[2]) / chief.dir[2];
    (chief.origin[0] + t * chief.dir[0], chief.origin[1] + t * chief.dir[1])
}

/// DOE window of `dims` centred on the cell nearest `(x, y)` (mm on the DOE plane), and its
/// phase at `wavelength`.
pub fn doe_window(
    doe: &DoeProfile,
    point: (f64, f64),
    dims: (usize, usize),
    wavelength: f64,
) -> Result<(DoeWindow, Array2<f64>)> {
    let window = DoeWindow {
        centre: (snap(point.1, doe.pitch), snap(point.0, doe.pitch)),
        rows: dims.0,
        cols: dims.1,
    };
    let scale = doe.phase_scale(wavelength)?;
    let h = doe.window_heights(&window)?;
    Ok((window, h.mapv(|v| v * scale)))
}

/// Carrier-stripped input field on the transition plane.
pub fn incident_field(setup: &OpticalSetup, source: &Source, plan: &PropagationPlan) -> Result<SampledField> {
    let n = setup.grid;
    match setup.system.mode {
        LensMode::ThinLens => thin_lens_field(
            &setup.system,
            source,
            (n, n),
            setup.pitch,
            plan.wavelength,
            plan.spectrum_center,
        ),
        LensMode::Traced => {
            let bundle = trace_system(&setup.system, source, setup.pupil, plan.wavelength)?;
            let grid = GridSpec::new(n, n, setup.pitch, plan.transition_origin);
            Ok(assemble(&bundle, &grid, plan.spectrum_center)?.field)
        }
    }
}

fn check_doe_pitch(doe: &DoeProfile, pitch: f64) -> Result<()> {
    if ((doe.pitch - pitch) / pitch).abs() > 1e-9 {
        return invalid(format!(
            "DOE pitch {} mm must equal the simulation pitch {} mm",
            doe.pitch, pitch
        ));
    }
    Ok(())
}

fn leg_kernels(plan: &PropagationPlan, n: usize, pitch: f64) -> Result<(AsmKernel, AsmKernel)> {
    let l1 = AsmKernel::new(
        (n, n),
        pitch,
        plan.wavelength,
        plan.z1,
        plan.spectrum_center,
        (
            plan.doe_origin.0 - plan.transition_origin.0,
            plan.doe_origin.1 - plan.transition_origin.1,
        ),
    )?;
    let l2 = AsmKernel::new(
        (n, n),
        pitch,
        plan.wavelength,
        plan.z2,
        plan.spectrum_center,
        (
            plan.sensor_origin.0 - plan.doe_origin.0,
            plan.sensor_origin.1 - plan.doe_origin.1,
        ),
    )?;
    Ok((l1, l2))
}

/// `ASM_z2{ ASM_z1{E_in exp(j phi_comp)} exp(j (phi_comp + phi_DOE)) }`, carrier-stripped,
/// on the sensor window.
pub fn propagate_two_step(
    transition: &SampledField,
    doe: Option<&DoeProfile>,
    plan: &PropagationPlan,
) -> Result<SampledField> {
    let (n, m) = transition.dim();
    if n != m {
        return invalid("two-step propagation expects a square window");
    }
    let (l1, l2) = leg_kernels(plan, n, transition.pitch)?;
    let mut u = l1.apply(&transition.values)?;
    if let Some(doe) = doe {
        check_doe_pitch(doe, transition.pitch)?;
        let q = doe.quantized()?;
        let scale = q.phase_scale(plan.wavelength)?;
        let h = q.window_heights(&plan.doe_window)?;
        ndarray::Zip::from(&mut u)
            .and(&h)
            .for_each(|v, &h| *v *= Complex64::from_polar(1.0, scale * h));
    }
    let values = l2.apply(&u)?;
    SampledField::new(values, transition.pitch, plan.sensor_origin, plan.wavelength)
}

/// Normalized intensity PSF on the sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    pub values: Array2<f64>,
    pub pitch: f64,
    /// Physical centre of the PSF window (the chief landing pixel), mm.
    pub origin: (f64, f64),
}

impl Psf {
    /// Cell of the chief landing pixel.
    pub fn centre_cell(&self) -> (usize, usize) {
        let (r, c) = self.values.dim();
        (r / 2, c / 2)
    }

    pub fn sum(&self) -> f64 {
        self.values.sum()
    }
}

fn crop_intensity(field: &Array2<Complex64>, size: usize) -> Array2<f64> {
    let (r, c) = field.dim();
    let (r0, c0) = (centre_offset(r, size), centre_offset(c, size));
    field
        .slice(ndarray::s![r0..r0 + size, c0..c0 + size])
        .mapv(|v| v.norm_sqr())
}

fn normalize_psf(i: Array2<f64>, pitch: f64, origin: (f64, f64)) -> Result<Psf> {
    let s = i.sum();
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::NonFinite("PSF normalization".into()));
    }
    Ok(Psf {
        values: i.mapv(|v| v / s),
        pitch,
        origin,
    })
}

/// Transition plane straight to the sensor window, over `z` mm.
fn propagate_direct(transition: &SampledField, plan: &PropagationPlan, z: f64) -> Result<SampledField> {
    let kernel = AsmKernel::new(
        transition.dim(),
        transition.pitch,
        plan.wavelength,
        z,
        plan.spectrum_center,
        (
            plan.sensor_origin.0 - plan.transition_origin.0,
            plan.sensor_origin.1 - plan.transition_origin.1,
        ),
    )?;
    SampledField::new(
        kernel.apply(&transition.values)?,
        transition.pitch,
        plan.sensor_origin,
        plan.wavelength,
    )
}

/// True when the quantized heights under the window are constant (a global phase at most).
fn flat_under_window(doe: &DoeProfile, window: &DoeWindow) -> Result<bool> {
    let h = doe.quantized()?.window_heights(window)?;
    let first = h.first().copied().unwrap_or(0.0);
    Ok(h.iter().all(|&v| v == first))
}

/// Monochromatic PSF of a point source. A flat DOE is skipped and the field propagates in one
/// leg, so the result does not depend on where the DOE sits.
pub fn psf(setup: &OpticalSetup, source: &Source, doe: Option<&DoeProfile>, wavelength: f64) -> Result<Psf> {
    let plan = plan(setup, source, wavelength)?;
    let input = incident_field(setup, source, &plan)?;
    let flat = match doe {
        None => true,
        Some(d) => {
            check_doe_pitch(d, setup.pitch)?;
            flat_under_window(d, &plan.doe_window)?
        }
    };
    let sensor = if flat {
        propagate_direct(&input, &plan, setup.sensor_z - setup.transition_z())?
    } else {
        propagate_two_step(&input, doe, &plan)?
    };
    normalize_psf(
        crop_intensity(&sensor.values, setup.psf_size),
        setup.pitch,
        plan.sensor_origin,
    )
}

/// Gaussian channel responses `exp(-(l - mu_c)^2 / (2 sigma^2))`, one row per centre.
pub fn gaussian_response(wavelengths: &[f64], centres: &[f64], sigma: f64) -> Array2<f64> {
    Array2::from_shape_fn((centres.len(), wavelengths.len()), |(c, k)| {
        (-(wavelengths[k] - centres[c]).powi(2) / (2.0 * sigma * sigma)).exp()
    })
}

pub const DEFAULT_WAVELENGTHS: [f64; 3] = [0.46, 0.55, 0.64];
pub const DEFAULT_RESPONSE_SIGMA: f64 = 0.03;

pub fn default_response(wavelengths: &[f64]) -> Array2<f64> {
    gaussian_response(wavelengths, &DEFAULT_WAVELENGTHS, DEFAULT_RESPONSE_SIGMA)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPsf {
    /// One normalized PSF per output channel.
    pub channels: Vec<Array2<f64>>,
    /// Monochromatic PSFs, one per wavelength.
    pub monochromatic: Vec<Psf>,
    pub wavelengths: Vec<f64>,
    pub response: Array2<f64>,
}

/// Combine monochromatic PSFs with a `channels x wavelengths` response, renormalizing per channel.
pub fn combine_spectral(mono: &[Psf], response: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
    if response.ncols() != mono.len() || mono.is_empty() {
        return invalid("response matrix must have one column per wavelength");
    }
    if response.iter().any(|&w| !(w >= 0.0)) {
        return invalid("response weights must be non-negative");
    }
    let mut out = Vec::with_capacity(response.nrows());
    for (c, row) in response.outer_iter().enumerate() {
        if row.sum() <= 0.0 {
            return invalid(format!("response row {c} is all zero"));
        }
        let mut acc = Array2::zeros(mono[0].values.dim());
        for (w, p) in row.iter().zip(mono) {
            if *w != 0.0 {
                acc.scaled_add(*w, &p.values);
            }
        }
        let s = acc.sum();
        out.push(acc.mapv(|v| v / s));
    }
    Ok(out)
}

pub fn spectral_psf(
    setup: &OpticalSetup,
    source: &Source,
    doe: Option<&DoeProfile>,
    wavelengths: &[f64],
    response: &Array2<f64>,
) -> Result<SpectralPsf> {
    if wavelengths.is_empty() {
        return invalid("at least one wavelength is required");
    }
    let mono = wavelengths
        .par_iter()
        .map(|&l| psf(setup, source, doe, l))
        .collect::<Result<Vec<_>>>()?;
    let channels = combine_spectral(&mono, response)?;
    Ok(SpectralPsf {
        channels,
        monochromatic: mono,
        wavelengths: wavelengths.to_vec(),
        response: response.clone(),
    })
}

/// Spectral PSFs for every (angle, depth) pair, angle-major, one record per channel.
/// Angles in degrees along +x, depths in metres (infinite allowed).
pub fn psf_lattice(
    setup: &OpticalSetup,
    doe: Option<&DoeProfile>,
    angles_deg: &[f64],
    depths_m: &[f64],
    wavelengths: &[f64],
    response: &Array2<f64>,
) -> Result<Vec<PsfRecord>> {
    if angles_deg.is_empty() || depths_m.is_empty() {
        return invalid("angle and depth lists must be non-empty");
    }
    let points: Vec<(f64, f64)> = angles_deg
        .iter()
        .flat_map(|&a| depths_m.iter().map(move |&d| (a, d)))
        .collect();
    let per_point = points
        .par_iter()
        .map(|&(a, d)| {
            let src = setup.source(a.to_radians(), d * 1e3);
            let sp = spectral_psf(setup, &src, doe, wavelengths, response)?;
            let offset = sp.monochromatic[0].origin;
            Ok(sp
                .channels
                .into_iter()
                .enumerate()
                .map(|(c, values)| PsfRecord {
                    angle_deg: a,
                    depth_m: d,
                    channel: c as u32,
                    offset,
                    values,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

/// Precomputed height-independent part of one (field point, wavelength) propagation.
#[derive(Debug, Clone)]
pub struct PreparedPath {
    pub plan: PropagationPlan,
    /// Field arriving at the DOE window.
    u_doe: Array2<Complex64>,
    leg2: AsmKernel,
    phase_scale: f64,
    psf_size: usize,
    pitch: f64,
}

/// Intermediate values kept by [`PreparedPath::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    u2: Array2<Complex64>,
    sensor: Array2<Complex64>,
    intensity_sum: f64,
}

impl PreparedPath {
    pub fn new(setup: &OpticalSetup, source: &Source, doe: &DoeProfile, wavelength: f64) -> Result<Self> {
        check_doe_pitch(doe, setup.pitch)?;
        let plan = plan(setup, source, wavelength)?;
        let input = incident_field(setup, source, &plan)?;
        let (l1, leg2) = leg_kernels(&plan, setup.grid, setup.pitch)?;
        let u_doe = l1.apply(&input.values)?;
        // fail early if the window leaves the DOE
        doe.window_heights(&plan.doe_window)?;
        Ok(Self {
            plan,
            u_doe,
            leg2,
            phase_scale: doe.phase_scale(wavelength)?,
            psf_size: setup.psf_size,
            pitch: setup.pitch,
        })
    }

    /// PSF for the given (already quantized, if desired) heights.
    pub fn forward(&self, doe: &DoeProfile) -> Result<(Psf, ForwardState)> {
        let h = doe.window_heights(&self.plan.doe_window)?;
        let mut u2 = self.u_doe.clone();
        let scale = self.phase_scale;
        ndarray::Zip::from(&mut u2)
            .and(&h)
            .for_each(|v, &h| *v *= Complex64::from_polar(1.0, scale * h));
        let sensor = self.leg2.apply(&u2)?;
        let i = crop_intensity(&sensor, self.psf_size);
        let s = i.sum();
        let psf = normalize_psf(i, self.pitch, self.plan.sensor_origin)?;
        Ok((
            psf,
            ForwardState {
                u2,
                sensor,
                intensity_sum: s,
            },
        ))
    }

    /// Accumulate `dL/dh` into `grad` given `dL/dPSF` for the PSF returned by `forward`.
    pub fn backward(
        &self,
        doe: &DoeProfile,
        psf: &Psf,
        state: &ForwardState,
        dl_dpsf: &Array2<f64>,
        grad: &mut DoeGradient,
    ) -> Result<()> {
        // P = I / S  =>  dL/dI = (g - <g, P>) / S
        let gp: f64 = dl_dpsf.iter().zip(psf.values.iter()).map(|(g, p)| g * p).sum();
        let n = self.u_doe.nrows();
        let size = self.psf_size;
        let off = centre_offset(n, size);
        // I = |s|^2  =>  gradient wrt s (conjugate convention) is 2 dL/dI s
        let mut gs = Array2::<Complex64>::zeros((n, n));
        for r in 0..size {
            for c in 0..size {
                let gi = (dl_dpsf[[r, c]] - gp) / state.intensity_sum;
                gs[[r + off, c + off]] = state.sensor[[r + off, c + off]] * (2.0 * gi);
            }
        }
        let gu2 = self.leg2.adjoint(&gs)?;
        // u2 = u_doe exp(j phi)  =>  dL/dphi = Re(conj(g) j u2)
        let j = Complex64::new(0.0, 1.0);
        let scale = self.phase_scale;
        let dh = ndarray::Zip::from(&gu2)
            .and(&state.u2)
            .map_collect(|g, u| (g.conj() * j * u).re * scale);
        if dh.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DOE gradient".into()));
        }
        doe.accumulate_window_gradient(&self.plan.doe_window, &dh, grad)
    }
}

/// One stored PSF with its lattice coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfRecord {
    pub angle_deg: f64,
    pub depth_m: f64,
    pub channel: u32,
    /// Sensor-window centre, mm.
    pub offset: (f64, f64),
    pub values: Array2<f64>,
}

/// `WFPSF <n_psfs> <rows> <cols> <pitch_um>` header, then per PSF: f32 angle (deg), f32 depth (m),
/// u32 channel, f32 offset x (mm), f32 offset y (mm), rows*cols f32 intensities. Little-endian.
pub fn write_psf_stack<W: Write>(records: &[PsfRecord], pitch: f64, mut w: W) -> Result<()> {
    let (rows, cols) = records.first().map(|r| r.values.dim()).unwrap_or((0, 0));
    writeln!(w, "WFPSF {} {} {} {}", records.len(), rows, cols, pitch * 1e3)?;
    let mut buf = Vec::new();
    for r in records {
        if r.values.dim() != (rows, cols) {
            return Err(Error::DimensionMismatch {
                expected: (rows, cols),
                got: r.values.dim(),
            });
        }
        buf.clear();
        buf.extend_from_slice(&(r.angle_deg as f32).to_le_bytes());
        buf.extend_from_slice(&(r.depth_m as f32).to_le_bytes());
        buf.extend_from_slice(&r.channel.to_le_bytes());
        buf.extend_from_slice(&(r.offset.0 as f32).to_le_bytes());
        buf.extend_from_slice(&(r.offset.1 as f32).to_le_bytes());
        for v in r.values.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Returns the records and the pitch in mm.
pub fn read_psf_stack<R: BufRead>(mut r: R) -> Result<(Vec<PsfRecord>, f64)> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let p: Vec<&str> = header.split_whitespace().collect();
    if p.len() != 5 || p[0] != "WFPSF" {
        return Err(Error::Parse(format!("bad WFPSF header: {:?}", header.trim_end())));
    }
    let n: usize = parse_token(p[1])?;
    let rows: usize = parse_token(p[2])?;
    let cols: usize = parse_token(p[3])?;
    let pitch_um: f64 = parse_token(p[4])?;
    let mut out = Vec::with_capacity(n);
    let mut head = [0u8; 20];
    let mut data = vec![0u8; rows * cols * 4];
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    for _ in 0..n {
        r.read_exact(&mut head)?;
        r.read_exact(&mut data)?;
        let values: Vec<f64> = data.chunks_exact(4).map(f).collect();
        out.push(PsfRecord {
            angle_deg: f(&head[0..4]),
            depth_m: f(&head[4..8]),
            channel: u32::from_le_bytes([head[8], head[9], head[10], head[11]]),
            offset: (f(&head[12..16]), f(&head[16..20])),
            values: Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Parse(e.to_string()))?,
        });
    }
    Ok((out, pitch_um * 1e-3))
}
