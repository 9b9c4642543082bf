use std::io::{BufRead, Write};

use ndarray::Array2;

use super::material::{Material, NOMINAL_WAVELENGTH};
use crate::error::{invalid, Error, Result};
use crate::field::parse_token;

/// Tolerance used when checking heights against `[0, h_max]`.
const HEIGHT_SLACK: f64 = 1e-9;

/// Height map parameterization.
#[derive(Debug, Clone, PartialEq)]
pub enum DoeHeights {
    /// Full 2D grid in um, centre cell `(rows/2, cols/2)` on the optical axis.
    FullGrid(Array2<f64>),
    /// Radial profile in um, sample `i` at `r = i * pitch`.
    Radial(Vec<f64>),
}

/// Surface-relief diffractive element.
#[derive(Debug, Clone, PartialEq)]
pub struct DoeProfile {
    pub heights: DoeHeights,
    /// Lateral sample pitch, mm.
    pub pitch: f64,
    pub substrate: Material,
    /// Axial position, mm.
    pub z: f64,
    /// Quantization level count; 0 means continuous.
    pub levels: u32,
}

/// Rectangular block of DOE cells addressed relative to the axis cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DoeWindow {
    /// Axis-relative (row, col) index of the window's centre cell.
    pub centre: (isize, isize),
    pub rows: usize,
    pub cols: usize,
}

impl DoeWindow {
    /// Axis-relative index of the first row / column.
    pub fn start(&self) -> (isize, isize) {
        (
            self.centre.0 - (self.rows / 2) as isize,
            self.centre.1 - (self.cols / 2) as isize,
        )
    }

    /// Physical position of the centre cell, mm.
    pub fn centre_position(&self, pitch: f64) -> (f64, f64) {
        (self.centre.1 as f64 * pitch, self.centre.0 as f64 * pitch)
    }
}

/// Gradient with the same shape as the DOE parameterization.
#[derive(Debug, Clone, PartialEq)]
pub enum DoeGradient {
    FullGrid(Array2<f64>),
    Radial(Vec<f64>),
}

impl DoeGradient {
    pub fn zeros_like(doe: &DoeProfile) -> Self {
        match &doe.heights {
            DoeHeights::FullGrid(h) => DoeGradient::FullGrid(Array2::zeros(h.dim())),
            DoeHeights::Radial(p) => DoeGradient::Radial(vec![0.0; p.len()]),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            DoeGradient::FullGrid(g) => g.as_slice().expect("standard layout"),
            DoeGradient::Radial(g) => g,
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            DoeGradient::FullGrid(g) => g.as_slice_mut().expect("standard layout"),
            DoeGradient::Radial(g) => g,
        }
    }

    pub fn add_assign(&mut self, other: &DoeGradient) {
        for (a, b) in self.as_mut_slice().iter_mut().zip(other.as_slice()) {
            *a += b;
        }
    }
}

impl DoeProfile {
    pub fn zeros_grid(rows: usize, cols: usize, pitch: f64, substrate: Material, z: f64) -> Self {
        Self {
            heights: DoeHeights::FullGrid(Array2::zeros((rows, cols))),
            pitch,
            substrate,
            z,
            levels: 0,
        }
    }

    pub fn zeros_radial(samples: usize, pitch: f64, substrate: Material, z: f64) -> Self {
        Self {
            heights: DoeHeights::Radial(vec![0.0; samples]),
            pitch,
            substrate,
            z,
            levels: 0,
        }
    }

    /// One full phase wrap at the nominal wavelength: `lambda0 / (n(lambda0) - 1)`, um.
    pub fn h_max(&self) -> f64 {
        h_max(&self.substrate)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pitch > 0.0) {
            return invalid("DOE pitch must be positive");
        }
        let hmax = self.h_max();
        if !(hmax > 0.0 && hmax.is_finite()) {
            return invalid("DOE substrate index must exceed 1");
        }
        if self.levels == 1 {
            return invalid("quantization needs at least 2 levels");
        }
        let bad = self
            .params()
            .iter()
            .find(|&&h| !(h >= -HEIGHT_SLACK && h <= hmax + HEIGHT_SLACK));
        if let Some(h) = bad {
            return invalid(format!("height {h} um outside [0, {hmax}]"));
        }
        Ok(())
    }

    /// Flat view of the free parameters.
    pub fn params(&self) -> &[f64] {
        match &self.heights {
            DoeHeights::FullGrid(h) => h.as_slice().expect("standard layout"),
            DoeHeights::Radial(p) => p,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match &mut self.heights {
            DoeHeights::FullGrid(h) => h.as_slice_mut().expect("standard layout"),
            DoeHeights::Radial(p) => p,
        }
    }

    /// Clamp every parameter into `[0, h_max]`.
    pub fn clamp(&mut self) {
        let hmax = self.h_max();
        for h in self.params_mut() {
            *h = h.clamp(0.0, hmax);
        }
    }

    /// Snap heights to `levels` uniform values spanning `[0, h_max]`. `levels == 0` is the identity.
    pub fn quantized(&self) -> Result<DoeProfile> {
        let mut out = self.clone();
        match self.levels {
            0 => {}
            1 => return invalid("quantization needs at least 2 levels"),
            n => {
                let hmax = self.h_max();
                for h in out.params_mut() {
                    *h = snap(*h, hmax, n);
                }
            }
        }
        Ok(out)
    }

    /// Phase delay `(2 pi / lambda) (n(lambda) - 1) h` in radians, per parameter.
    pub fn phase_scale(&self, wavelength: f64) -> Result<f64> {
        let n = self.substrate.refractive_index(wavelength)?;
        Ok(2.0 * std::f64::consts::PI / wavelength * (n - 1.0))
    }

    /// Phase of the full height grid (radial profiles are expanded over their bounding square).
    pub fn phase(&self, wavelength: f64) -> Result<Array2<f64>> {
        let scale = self.phase_scale(wavelength)?;
        let grid = match &self.heights {
            DoeHeights::FullGrid(h) => h.clone(),
            DoeHeights::Radial(p) => {
                let n = 2 * p.len() - 1;
                // inscribed square of the profile disc
                let half = ((p.len() - 1) as f64 / std::f64::consts::SQRT_2).floor() as usize;
                let n = n.min(2 * half + 1).max(1);
                self.radial_expand(n, n, self.pitch)?
            }
        };
        Ok(grid.mapv(|h| h * scale))
    }

    /// Linearly interpolate the radial profile onto a `rows x cols` grid centred on the axis.
    pub fn radial_expand(&self, rows: usize, cols: usize, pitch: f64) -> Result<Array2<f64>> {
        let DoeHeights::Radial(profile) = &self.heights else {
            return invalid("radial_expand requires a radial DOE");
        };
        let ys = crate::field::axis_coords(rows, pitch, 0.0);
        let xs = crate::field::axis_coords(cols, pitch, 0.0);
        let rmax = (profile.len() - 1) as f64 * self.pitch;
        let mut out = Array2::zeros((rows, cols));
        for (i, y) in ys.iter().enumerate() {
            for (j, x) in xs.iter().enumerate() {
                let r = x.hypot(*y);
                if r > rmax * (1.0 + 1e-12) {
                    return invalid(format!("grid radius {r} mm exceeds radial profile extent {rmax} mm"));
                }
                out[[i, j]] = radial_lookup(profile, r / self.pitch);
            }
        }
        Ok(out)
    }

    /// Heights on a window of the DOE lattice.
    pub fn window_heights(&self, window: &DoeWindow) -> Result<Array2<f64>> {
        let (r0, c0) = window.start();
        match &self.heights {
            DoeHeights::FullGrid(h) => {
                let (dr, dc) = h.dim();
                let (a0, b0) = (r0 + (dr / 2) as isize, c0 + (dc / 2) as isize);
                if a0 < 0 || b0 < 0 || a0 as usize + window.rows > dr || b0 as usize + window.cols > dc {
                    return Err(Error::OutsideDoe {
                        row0: a0,
                        col0: b0,
                        rows: window.rows,
                        cols: window.cols,
                        doe_rows: dr,
                        doe_cols: dc,
                    });
                }
                let (a0, b0) = (a0 as usize, b0 as usize);
                Ok(h.slice(ndarray::s![a0..a0 + window.rows, b0..b0 + window.cols])
                    .to_owned())
            }
            DoeHeights::Radial(p) => {
                let rmax = (p.len() - 1) as f64;
                let mut out = Array2::zeros((window.rows, window.cols));
                for i in 0..window.rows {
                    let y = (r0 + i as isize) as f64;
                    for j in 0..window.cols {
                        let x = (c0 + j as isize) as f64;
                        let r = x.hypot(y);
                        if r > rmax {
                            let n = 2 * p.len() - 1;
                            return Err(Error::OutsideDoe {
                                row0: r0,
                                col0: c0,
                                rows: window.rows,
                                cols: window.cols,
                                doe_rows: n,
                                doe_cols: n,
                            });
                        }
                        out[[i, j]] = radial_lookup(p, r);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Adjoint of [`window_heights`](Self::window_heights): add `grad` (per window cell)
    /// into the parameter gradient.
    pub fn accumulate_window_gradient(
        &self,
        window: &DoeWindow,
        grad: &Array2<f64>,
        out: &mut DoeGradient,
    ) -> Result<()> {
        let (r0, c0) = window.start();
        match out {
            DoeGradient::FullGrid(g) => {
                let (dr, dc) = g.dim();
                let (a0, b0) = (r0 + (dr / 2) as isize, c0 + (dc / 2) as isize);
                if a0 < 0 || b0 < 0 || a0 as usize + window.rows > dr || b0 as usize + window.cols > dc {
                    return invalid("gradient window outside the DOE grid");
                }
                let (a0, b0) = (a0 as usize, b0 as usize);
                let mut view = g.slice_mut(ndarray::s![a0..a0 + window.rows, b0..b0 + window.cols]);
                view += grad;
            }
            DoeGradient::Radial(g) => {
                let last = g.len() - 1;
                for i in 0..window.rows {
                    let y = (r0 + i as isize) as f64;
                    for j in 0..window.cols {
                        let x = (c0 + j as isize) as f64;
                        let u = x.hypot(y);
                        let k = (u.floor() as usize).min(last);
                        let w = u - k as f64;
                        let v = grad[[i, j]];
                        if k < last {
                            g[k] += (1.0 - w) * v;
                            g[k + 1] += w * v;
                        } else {
                            g[k] += v;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn h_max(substrate: &Material) -> f64 {
    NOMINAL_WAVELENGTH / (substrate.index_unchecked(NOMINAL_WAVELENGTH) - 1.0)
}

fn snap(h: f64, hmax: f64, levels: u32) -> f64 {
    let step = hmax / (levels - 1) as f64;
    let k = (h / step).round().clamp(0.0, (levels - 1) as f64);
    if k == (levels - 1) as f64 {
        hmax
    } else {
        k * step
    }
}

/// Linear interpolation of `profile` at fractional sample index `u`.
fn radial_lookup(profile: &[f64], u: f64) -> f64 {
    let last = profile.len() - 1;
    let k = (u.floor() as usize).min(last);
    if k >= last {
        return profile[last];
    }
    let w = u - k as f64;
    (1.0 - w) * profile[k] + w * profile[k + 1]
}

pub fn quantize_heights(doe: &DoeProfile) -> Result<DoeProfile> {
    doe.quantized()
}

pub fn doe_phase(doe: &DoeProfile, wavelength: f64) -> Result<Array2<f64>> {
    doe.phase(wavelength)
}

pub fn radial_expand(doe: &DoeProfile, rows: usize, cols: usize, pitch: f64) -> Result<Array2<f64>> {
    doe.radial_expand(rows, cols, pitch)
}

/// Position of the DOE along the principal-plane-to-sensor segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoePlacement {
    pub s: f64,
}

impl DoePlacement {
    pub fn new(s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return invalid(format!("placement s must lie in [0, 1], got {s}"));
        }
        Ok(Self { s })
    }

    /// Distance from the principal plane, mm.
    pub fn distance(&self, principal_z: f64, sensor_z: f64) -> f64 {
        self.s * (sensor_z - principal_z)
    }

    /// Absolute axial position, mm.
    pub fn resolve(&self, principal_z: f64, sensor_z: f64) -> f64 {
        principal_z + self.distance(principal_z, sensor_z)
    }
}

/// Write the `WFDOE` file: header `WFDOE <rows> <cols> <pitch_um> <n0> <levels> <axial_mm>`
/// then little-endian f32 heights in um, row-major. Radial profiles use `rows = 1`.
pub fn write_doe<W: Write>(doe: &DoeProfile, mut w: W) -> Result<()> {
    let (rows, cols, data): (usize, usize, &[f64]) = match &doe.heights {
        DoeHeights::FullGrid(h) => (h.nrows(), h.ncols(), h.as_slice().expect("standard layout")),
        DoeHeights::Radial(p) => (1, p.len(), p),
    };
    writeln!(
        w,
        "WFDOE {} {} {} {} {} {}",
        rows,
        cols,
        doe.pitch * 1e3,
        doe.substrate.n0,
        doe.levels,
        doe.z
    )?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &h in data {
        buf.extend_from_slice(&(h as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_doe<R: BufRead>(mut r: R) -> Result<DoeProfile> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let p: Vec<&str> = header.split_whitespace().collect();
    if p.len() != 7 || p[0] != "WFDOE" {
        return Err(Error::Parse(format!("bad WFDOE header: {:?}", header.trim_end())));
    }
    let rows: usize = parse_token(p[1])?;
    let cols: usize = parse_token(p[2])?;
    let pitch_um: f64 = parse_token(p[3])?;
    let n0: f64 = parse_token(p[4])?;
    let levels: u32 = parse_token(p[5])?;
    let z: f64 = parse_token(p[6])?;
    let mut raw = vec![0u8; rows * cols * 4];
    r.read_exact(&mut raw)?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let heights = if rows == 1 {
        DoeHeights::Radial(data)
    } else {
        DoeHeights::FullGrid(Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Parse(e.to_string()))?)
    };
    let mut doe = DoeProfile {
        heights,
        pitch: pitch_um * 1e-3,
        substrate: Material::constant(n0),
        z,
        levels,
    };
    // f32 storage can push boundary values a hair past h_max
    doe.clamp();
    doe.validate()?;
    Ok(doe)
}
