use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::field::{crop_array, fft_frequencies, pad_array, Fft2, SampledField};
use crate::raytrace::Vec3;

/// Band-limiting that removes more than this fraction of the propagating energy is logged.
pub const BAND_LOSS_WARNING: f64 = 0.10;

/// Per-axis local-frequency bound `1 / (lambda sqrt((2 z df)^2 + 1))`, cycles/mm,
/// for an on-axis propagation of `z` mm with frequency bin `df` cycles/mm.
pub fn band_limit(wavelength: f64, z: f64, df: f64) -> f64 {
    let l = wavelength * 1e-3;
    1.0 / (l * ((2.0 * z * df).powi(2) + 1.0).sqrt())
}

/// Padded linear-convolution angular-spectrum operator between two windows of equal
/// shape and pitch.
///
/// Fields are carrier-stripped: the physical field is `u(x, y) exp(j 2 pi (fx x + fy y))`
/// with `spectrum_center = (fx, fy)` and absolute plane coordinates. The output window is
/// displaced by `shift` mm from the input window. Frequencies whose impulse-response
/// footprint leaves the padded window are removed (a displaced, off-axis form of the
/// usual local-frequency bound), as are evanescent ones.
#[derive(Clone)]
pub struct AsmKernel {
    dims: (usize, usize),
    padded: (usize, usize),
    transfer: Array2<Complex64>,
    fft: Fft2,
    identity: bool,
}

impl std::fmt::Debug for AsmKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AsmKernel")
            .field("dims", &self.dims)
            .field("padded", &self.padded)
            .field("identity", &self.identity)
            .finish()
    }
}

fn padded_len(n: usize) -> usize {
    2 * n
}

impl AsmKernel {
    pub fn new(
        dims: (usize, usize),
        pitch: f64,
        wavelength: f64,
        z: f64,
        spectrum_center: (f64, f64),
        shift: (f64, f64),
    ) -> Result<Self> {
        let l = wavelength * 1e-3;
        if !(pitch > 0.0 && l > 0.0) {
            return invalid("pitch and wavelength must be positive");
        }
        if l * 0.5 / pitch >= 1.0 {
            return invalid(format!(
                "pitch {pitch} mm leaves no propagating band at {wavelength} um"
            ));
        }
        let padded = (padded_len(dims.0), padded_len(dims.1));
        let fft = Fft2::new(padded.0, padded.1);
        if z == 0.0 && shift == (0.0, 0.0) {
            return Ok(Self {
                dims,
                padded,
                transfer: Array2::zeros((0, 0)),
                fft,
                identity: true,
            });
        }
        let fy = fft_frequencies(padded.0, pitch);
        let fx = fft_frequencies(padded.1, pitch);
        let half_x = 0.5 * padded.1 as f64 * pitch;
        let half_y = 0.5 * padded.0 as f64 * pitch;
        // footprint position of each axis frequency, relative to the output window
        let keep = |f: f64, half: f64, d: f64| -> bool {
            let a = 1.0 - l * l * f * f;
            if a <= 0.0 {
                return false;
            }
            (z * l * f / a.sqrt() - d).abs() <= half
        };
        // the unpaired Nyquist bin is dropped so the operator commutes with reflections
        let mask = |fs: &[f64], fc: f64, half: f64, d: f64| -> Vec<bool> {
            let nyq = fs.len() / 2;
            fs.iter()
                .enumerate()
                .map(|(i, &f)| i != nyq && keep(f + fc, half, d))
                .collect()
        };
        let kx = mask(&fx, spectrum_center.0, half_x, shift.0);
        let ky = mask(&fy, spectrum_center.1, half_y, shift.1);
        let k = 2.0 * std::f64::consts::PI / l;
        let two_pi = 2.0 * std::f64::consts::PI;
        let transfer = Array2::from_shape_fn(padded, |(i, j)| {
            if !(kx[j] && ky[i]) {
                return Complex64::new(0.0, 0.0);
            }
            let gx = fx[j] + spectrum_center.0;
            let gy = fy[i] + spectrum_center.1;
            let a = 1.0 - l * l * (gx * gx + gy * gy);
            if a <= 0.0 {
                return Complex64::new(0.0, 0.0);
            }
            let phase = k * z * a.sqrt() + two_pi * (fx[j] * shift.0 + fy[i] * shift.1);
            Complex64::from_polar(1.0, phase)
        });
        Ok(Self {
            dims,
            padded,
            transfer,
            fft,
            identity: false,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    fn check(&self, a: &Array2<Complex64>) -> Result<()> {
        if a.dim() != self.dims {
            return Err(Error::DimensionMismatch {
                expected: self.dims,
                got: a.dim(),
            });
        }
        Ok(())
    }

    fn run(&self, input: &Array2<Complex64>, conj: bool, loss: bool) -> Result<(Array2<Complex64>, f64)> {
        self.check(input)?;
        if self.identity {
            return Ok((input.clone(), 0.0));
        }
        let mut buf = pad_array(input, self.padded.0, self.padded.1);
        self.fft.forward(&mut buf)?;
        let mut removed = 0.0;
        if loss {
            let (mut kept, mut total) = (0.0, 0.0);
            for (v, h) in buf.iter().zip(self.transfer.iter()) {
                let e = v.norm_sqr();
                total += e;
                if h.re != 0.0 || h.im != 0.0 {
                    kept += e;
                }
            }
            if total > 0.0 {
                removed = 1.0 - kept / total;
            }
        }
        if conj {
            ndarray::Zip::from(&mut buf)
                .and(&self.transfer)
                .for_each(|v, h| *v *= h.conj());
        } else {
            ndarray::Zip::from(&mut buf)
                .and(&self.transfer)
                .for_each(|v, h| *v *= h);
        }
        self.fft.inverse(&mut buf)?;
        Ok((crop_array(&buf, self.dims.0, self.dims.1), removed))
    }

    pub fn apply(&self, input: &Array2<Complex64>) -> Result<Array2<Complex64>> {
        Ok(self.run(input, false, false)?.0)
    }

    /// Also reports the fraction of spectral energy removed by band limiting.
    pub fn apply_with_loss(&self, input: &Array2<Complex64>) -> Result<(Array2<Complex64>, f64)> {
        self.run(input, false, true)
    }

    /// Hermitian adjoint of [`apply`](Self::apply).
    pub fn adjoint(&self, input: &Array2<Complex64>) -> Result<Array2<Complex64>> {
        Ok(self.run(input, true, false)?.0)
    }
}

fn warn_loss(removed: f64) {
    if removed > BAND_LOSS_WARNING {
        log::warn!("band limiting removed {:.1}% of the field energy", 100.0 * removed);
    }
}

/// Angular-spectrum propagation by `z` mm in place (same window).
pub fn asm_propagate(field: &SampledField, z: f64) -> Result<SampledField> {
    asm_propagate_to(field, z, (0.0, 0.0), field.origin)
}

/// Propagate a carrier-stripped field by `z` mm into the window centred at `out_origin`.
pub fn asm_propagate_to(
    field: &SampledField,
    z: f64,
    spectrum_center: (f64, f64),
    out_origin: (f64, f64),
) -> Result<SampledField> {
    let shift = (out_origin.0 - field.origin.0, out_origin.1 - field.origin.1);
    let kernel = AsmKernel::new(field.dim(), field.pitch, field.wavelength, z, spectrum_center, shift)?;
    let (values, removed) = kernel.apply_with_loss(&field.values)?;
    warn_loss(removed);
    Ok(SampledField {
        values,
        origin: out_origin,
        ..field.clone()
    })
}

/// Multiply by `exp(-j 2 pi (fx x + fy y))` in absolute plane coordinates.
pub fn compensate(field: &SampledField, spectrum_center: (f64, f64)) -> SampledField {
    if spectrum_center == (0.0, 0.0) {
        return field.clone();
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let xs = field.xs();
    let ys = field.ys();
    let mut out = field.clone();
    for ((r, c), v) in out.values.indexed_iter_mut() {
        let phase = -two_pi * (spectrum_center.0 * xs[c] + spectrum_center.1 * ys[r]);
        *v *= Complex64::from_polar(1.0, phase);
    }
    out
}

/// Carrier frequency (cycles/mm) of a chief ray with unit direction `dir`.
pub fn spectrum_center_from_chief(dir: Vec3, wavelength: f64) -> Result<(f64, f64)> {
    if !(dir[2] > 0.0) {
        return Err(Error::BackwardChief(dir[2]));
    }
    let l = wavelength * 1e-3;
    Ok((dir[0] / l, dir[1] / l))
}

/// Intensity-weighted mean spatial frequency of a (sufficiently sampled) field.
pub fn spectrum_center_centroid(field: &SampledField) -> (f64, f64) {
    let (r, c) = field.dim();
    let mut spec = field.values.clone();
    Fft2::new(r, c).forward(&mut spec).expect("plan built for this shape");
    let fy = fft_frequencies(r, field.pitch);
    let fx = fft_frequencies(c, field.pitch);
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for ((i, j), v) in spec.indexed_iter() {
        let e = v.norm_sqr();
        sx += e * fx[j];
        sy += e * fy[i];
        s += e;
    }
    if s == 0.0 {
        return (0.0, 0.0);
    }
    (sx / s, sy / s)
}
