//! Complex field grids with physical sampling, and the FFT / padding
//! primitives every wave-optics operation is built on.
//!
//! Units are fixed crate-wide: lengths in mm, wavelengths in um, angles in
//! radians. Cell `(row, col)` of a grid sits at
//! `x = origin.0 + (col - cols/2) * pitch`, `y = origin.1 + (row - rows/2) * pitch`,
//! so `origin` is the physical position of the centre cell `(rows/2, cols/2)`.
//!
//! FFT convention: the forward transform is unnormalized and the inverse
//! carries the full `1/(rows*cols)` factor, so `inverse(forward(x)) == x`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Error, Result};

/// Regular 2D grid of complex amplitudes in a transverse plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    pub values: Array2<Complex64>,
    /// Sample spacing in mm.
    pub pitch: f64,
    /// Physical (x, y) position of the centre cell in mm.
    pub origin: (f64, f64),
    /// Vacuum wavelength in um.
    pub wavelength: f64,
}

impl SampledField {
    pub fn new(values: Array2<Complex64>, pitch: f64, origin: (f64, f64), wavelength: f64) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows < 2 || cols < 2 {
            return invalid(format!("field grid must be at least 2x2, got {rows}x{cols}"));
        }
        if !(pitch > 0.0 && pitch.is_finite()) {
            return invalid(format!("pitch must be positive, got {pitch}"));
        }
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return invalid(format!("wavelength must be positive, got {wavelength}"));
        }
        Ok(Self {
            values,
            pitch,
            origin,
            wavelength,
        })
    }

    pub fn zeros(rows: usize, cols: usize, pitch: f64, origin: (f64, f64), wavelength: f64) -> Result<Self> {
        Self::new(Array2::zeros((rows, cols)), pitch, origin, wavelength)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Physical x coordinate of every column.
    pub fn xs(&self) -> Vec<f64> {
        axis_coords(self.values.ncols(), self.pitch, self.origin.0)
    }

    /// Physical y coordinate of every row.
    pub fn ys(&self) -> Vec<f64> {
        axis_coords(self.values.nrows(), self.pitch, self.origin.1)
    }

    /// Sum of `|value|^2 * pitch^2`.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.pitch * self.pitch
    }

    /// Wavenumber `2*pi/lambda` in rad/mm.
    pub fn wavenumber(&self) -> f64 {
        wavenumber(self.wavelength)
    }

    pub fn intensity(&self) -> Array2<f64> {
        self.values.mapv(|v| v.norm_sqr())
    }
}

/// Wavenumber in rad/mm for a wavelength in um.
pub fn wavenumber(wavelength_um: f64) -> f64 {
    2.0 * std::f64::consts::PI / (wavelength_um * 1e-3)
}

pub(crate) fn axis_coords(n: usize, pitch: f64, origin: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    (0..n).map(|i| origin + (i as f64 - c) * pitch).collect()
}

/// Spatial frequencies (cycles/mm) of an FFT grid, in unshifted FFT order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(rows: usize, cols: usize, pitch: f64) -> Self {
        Self {
            fx: fft_frequencies(cols, pitch),
            fy: fft_frequencies(rows, pitch),
        }
    }

    pub fn nyquist(pitch: f64) -> f64 {
        0.5 / pitch
    }
}

/// `numpy.fft.fftfreq` equivalent.
pub fn fft_frequencies(n: usize, pitch: f64) -> Vec<f64> {
    let df = 1.0 / (n as f64 * pitch);
    (0..n)
        .map(|k| {
            let k = if k < n.div_ceil(2) {
                k as isize
            } else {
                k as isize - n as isize
            };
            k as f64 * df
        })
        .collect()
}

/// Planned 2D FFT for a fixed grid shape.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.rows, self.cols)
    }
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn check(&self, data: &Array2<Complex64>) -> Result<()> {
        if data.dim() != (self.rows, self.cols) {
            return Err(Error::DimensionMismatch {
                expected: (self.rows, self.cols),
                got: data.dim(),
            });
        }
        Ok(())
    }

    /// Unnormalized forward transform, in place.
    pub fn forward(&self, data: &mut Array2<Complex64>) -> Result<()> {
        self.check(data)?;
        self.run(data, &self.row_fwd, &self.col_fwd);
        Ok(())
    }

    /// Inverse transform including the `1/(rows*cols)` factor, in place.
    pub fn inverse(&self, data: &mut Array2<Complex64>) -> Result<()> {
        self.check(data)?;
        self.run(data, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.rows * self.cols) as f64;
        data.mapv_inplace(|v| v * scale);
        Ok(())
    }

    fn run(&self, data: &mut Array2<Complex64>, row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        if !data.is_standard_layout() {
            *data = data.as_standard_layout().into_owned();
        }
        let buf = data.as_slice_mut().expect("standard layout");
        row.process(buf);
        let mut tmp = vec![Complex64::new(0.0, 0.0); buf.len()];
        transpose::transpose(buf, &mut tmp, self.cols, self.rows);
        col.process(&mut tmp);
        transpose::transpose(&tmp, buf, self.rows, self.cols);
    }
}

/// Frequency-domain representation of a [`SampledField`], unshifted order.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Array2<Complex64>,
    /// Pitch of the spatial grid the spectrum was taken from (mm).
    pub pitch: f64,
    pub origin: (f64, f64),
    pub wavelength: f64,
}

impl Spectrum {
    pub fn frequencies(&self) -> FrequencyGrid {
        let (r, c) = self.values.dim();
        FrequencyGrid::new(r, c, self.pitch)
    }
}

pub fn fft2(field: &SampledField) -> Spectrum {
    let (r, c) = field.dim();
    let mut values = field.values.clone();
    Fft2::new(r, c).forward(&mut values).expect("plan built for this shape");
    Spectrum {
        values,
        pitch: field.pitch,
        origin: field.origin,
        wavelength: field.wavelength,
    }
}

pub fn ifft2(spectrum: &Spectrum) -> SampledField {
    let (r, c) = spectrum.values.dim();
    let mut values = spectrum.values.clone();
    Fft2::new(r, c).inverse(&mut values).expect("plan built for this shape");
    SampledField {
        values,
        pitch: spectrum.pitch,
        origin: spectrum.origin,
        wavelength: spectrum.wavelength,
    }
}

/// Offset of a centred `inner` extent inside `outer`, keeping the centre cell fixed.
pub(crate) fn centre_offset(outer: usize, inner: usize) -> usize {
    outer / 2 - inner / 2
}

/// Zero-pad a raw grid to `rows x cols`, keeping the centre cell in place.
pub fn pad_array(values: &Array2<Complex64>, rows: usize, cols: usize) -> Array2<Complex64> {
    let (r, c) = values.dim();
    let mut out = Array2::zeros((rows, cols));
    let (r0, c0) = (centre_offset(rows, r), centre_offset(cols, c));
    out.slice_mut(ndarray::s![r0..r0 + r, c0..c0 + c]).assign(values);
    out
}

/// Inverse of [`pad_array`].
pub fn crop_array(values: &Array2<Complex64>, rows: usize, cols: usize) -> Array2<Complex64> {
    let (r, c) = values.dim();
    let (r0, c0) = (centre_offset(r, rows), centre_offset(c, cols));
    values.slice(ndarray::s![r0..r0 + rows, c0..c0 + cols]).to_owned()
}

/// Zero-pad by `factor` per axis (rounded up to an even size). Pitch and origin are unchanged.
pub fn pad(field: &SampledField, factor: f64) -> Result<SampledField> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return invalid(format!("pad factor must be >= 1, got {factor}"));
    }
    let (r, c) = field.dim();
    let grow = |n: usize| {
        let m = (n as f64 * factor).ceil() as usize;
        if m % 2 == n % 2 {
            m
        } else {
            m + 1
        }
    };
    let (rows, cols) = (grow(r), grow(c));
    Ok(SampledField {
        values: pad_array(&field.values, rows, cols),
        ..field.clone()
    })
}

/// Crop back to `rows x cols` around the centre cell.
pub fn crop(field: &SampledField, rows: usize, cols: usize) -> Result<SampledField> {
    let (r, c) = field.dim();
    if rows > r || cols > c || rows < 2 || cols < 2 {
        return invalid(format!("cannot crop {r}x{c} field to {rows}x{cols}"));
    }
    Ok(SampledField {
        values: crop_array(&field.values, rows, cols),
        ..field.clone()
    })
}

/// Write the `WFFIELD` dump: one text header line, then little-endian f32 (re, im) pairs, row-major.
pub fn write_field<W: Write>(field: &SampledField, mut w: W) -> Result<()> {
    let (r, c) = field.dim();
    writeln!(
        w,
        "WFFIELD {} {} {} {} {} {}",
        r, c, field.pitch, field.wavelength, field.origin.0, field.origin.1
    )?;
    let mut buf = Vec::with_capacity(r * c * 8);
    for v in field.values.iter() {
        buf.extend_from_slice(&(v.re as f32).to_le_bytes());
        buf.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_field<R: BufRead>(mut r: R) -> Result<SampledField> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 7 || parts[0] != "WFFIELD" {
        return Err(Error::Parse(format!("bad WFFIELD header: {:?}", header.trim_end())));
    }
    let rows: usize = parse_token(parts[1])?;
    let cols: usize = parse_token(parts[2])?;
    let pitch: f64 = parse_token(parts[3])?;
    let wavelength: f64 = parse_token(parts[4])?;
    let ox: f64 = parse_token(parts[5])?;
    let oy: f64 = parse_token(parts[6])?;
    let mut raw = vec![0u8; rows * cols * 8];
    r.read_exact(&mut raw)?;
    let values: Vec<Complex64> = raw
        .chunks_exact(8)
        .map(|b| {
            let re = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            let im = f32::from_le_bytes([b[4], b[5], b[6], b[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    let values = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Parse(e.to_string()))?;
    SampledField::new(values, pitch, (ox, oy), wavelength)
}

pub(crate) fn parse_token<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::Parse(format!("cannot parse token {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> SampledField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array2::from_shape_fn((n, n), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        SampledField::new(values, 0.01, (0.0, 0.0), 0.55).unwrap()
    }

    /// Textbook O(N^4) DFT, used as an independent reference.
    fn brute_dft(x: &Array2<Complex64>) -> Array2<Complex64> {
        let (r, c) = x.dim();
        Array2::from_shape_fn((r, c), |(u, v)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..r {
                for n in 0..c {
                    let ph = -2.0 * std::f64::consts::PI * ((u * m) as f64 / r as f64 + (v * n) as f64 / c as f64);
                    acc += x[[m, n]] * Complex64::from_polar(1.0, ph);
                }
            }
            acc
        })
    }

    #[test]
    fn constant_field_is_dc_only() {
        let f = SampledField::new(
            Array2::from_elem((8, 8), Complex64::new(1.0, 0.0)),
            0.1,
            (0.0, 0.0),
            0.55,
        )
        .unwrap();
        let s = fft2(&f);
        for ((u, v), val) in s.values.indexed_iter() {
            if (u, v) == (0, 0) {
                assert!((val - Complex64::new(64.0, 0.0)).norm() < 1e-12);
            } else {
                assert!(val.norm() < 1e-12, "bin {u},{v} = {val}");
            }
        }
    }

    #[test]
    fn round_trip_64() {
        let f = random_field(64, 1);
        let back = ifft2(&fft2(&f));
        let err = (&back.values - &f.values).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-12, "round-trip error {err}");
    }

    #[test]
    fn shifted_delta_matches_brute_force_dft() {
        let mut x = Array2::zeros((8, 8));
        x[[2, 5]] = Complex64::new(1.0, 0.0);
        let f = SampledField::new(x.clone(), 0.1, (0.0, 0.0), 0.55).unwrap();
        let s = fft2(&f);
        let oracle = brute_dft(&x);
        for (a, b) in s.values.iter().zip(oracle.iter()) {
            assert!((a - b).norm() < 1e-12);
            assert!((a.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_small_matches_brute_force_dft() {
        let f = random_field(6, 9);
        let s = fft2(&f);
        let oracle = brute_dft(&f.values);
        for (a, b) in s.values.iter().zip(oracle.iter()) {
            assert!((a - b).norm() < 1e-11);
        }
    }

    #[test]
    fn parseval_holds() {
        for &n in &[16usize, 64, 256, 512] {
            let f = random_field(n, n as u64);
            let s = fft2(&f);
            let spatial: f64 = f.values.iter().map(|v| v.norm_sqr()).sum();
            let spectral: f64 = s.values.iter().map(|v| v.norm_sqr()).sum::<f64>() / (n * n) as f64;
            assert!(((spatial - spectral) / spatial).abs() < 1e-10, "n={n}");
        }
    }

    #[test]
    fn real_even_field_has_real_spectrum() {
        let n = 32;
        // even about index 0 in the periodic sense
        let values = Array2::from_shape_fn((n, n), |(r, c)| {
            let dr = r.min(n - r) as f64;
            let dc = c.min(n - c) as f64;
            Complex64::new((-(dr * dr + dc * dc) / 20.0).exp() + 0.3 * (dr * 0.4).cos(), 0.0)
        });
        let s = fft2(&SampledField::new(values, 0.01, (0.0, 0.0), 0.55).unwrap());
        let max_im = s.values.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
        assert!(max_im < 1e-10, "max imag {max_im}");
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let plan = Fft2::new(8, 8);
        let mut data = Array2::zeros((8, 16));
        assert!(matches!(plan.forward(&mut data), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let f = random_field(64, 3);
        let p = pad(&f, 2.0).unwrap();
        assert_eq!(p.dim(), (128, 128));
        assert_eq!(p.origin, f.origin);
        assert_eq!(p.pitch, f.pitch);
        assert_eq!(p.values[[64, 64]], f.values[[32, 32]]);
        assert!((p.energy() - f.energy()).abs() <= 1e-12 * f.energy());
        let back = crop(&p, 64, 64).unwrap();
        assert_eq!(back, f);
        assert!(crop(&f, 65, 64).is_err());
    }

    #[test]
    fn frequencies_follow_fft_order() {
        let f = fft_frequencies(4, 0.5);
        assert_eq!(f, vec![0.0, 0.5, -1.0, -0.5]);
        assert_eq!(FrequencyGrid::nyquist(0.5), 1.0);
    }

    #[test]
    fn dump_round_trip() {
        let f = random_field(4, 5);
        let mut buf = Vec::new();
        write_field(&f, &mut buf).unwrap();
        assert!(buf.starts_with(b"WFFIELD 4 4 0.01 0.55 0 0\n"));
        let g = read_field(std::io::Cursor::new(buf)).unwrap();
        for (a, b) in f.values.iter().zip(g.values.iter()) {
            assert!((a - b).norm() < 1e-6);
        }
    }
}
