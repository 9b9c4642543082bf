//! Patchwise Wiener deconvolution and PSNR.

use ndarray::{s, Array2, Array3, Axis};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::field::Fft2;
use crate::render::{PatchGrid, PsfBank};

/// `conj(H) / (|H|^2 + 1 / snr)` applied to an edge-replicated copy of `image`.
/// `snr = inf` gives the plain inverse filter.
pub fn wiener_deconvolve(image: &Array2<f64>, psf: &Array2<f64>, snr: f64) -> Result<Array2<f64>> {
    if !(snr > 0.0) {
        return invalid(format!("snr must be positive, got {snr}"));
    }
    let (r, c) = image.dim();
    let (kr, kc) = psf.dim();
    let (mr, mc) = (kr.max(8), kc.max(8));
    let (pr, pc) = (r + 2 * mr, c + 2 * mc);
    let fft = Fft2::new(pr, pc);
    let mut h = Array2::<Complex64>::zeros((pr, pc));
    for ((a, b), &v) in psf.indexed_iter() {
        let i = (a as isize - (kr / 2) as isize).rem_euclid(pr as isize) as usize;
        let j = (b as isize - (kc / 2) as isize).rem_euclid(pc as isize) as usize;
        h[[i, j]] += Complex64::new(v, 0.0);
    }
    fft.forward(&mut h)?;
    let mut buf = Array2::from_shape_fn((pr, pc), |(i, j)| {
        let y = (i as isize - mr as isize).clamp(0, r as isize - 1) as usize;
        let x = (j as isize - mc as isize).clamp(0, c as isize - 1) as usize;
        Complex64::new(image[[y, x]], 0.0)
    });
    fft.forward(&mut buf)?;
    let reg = 1.0 / snr;
    let mut zero_bins = 0usize;
    ndarray::Zip::from(&mut buf).and(&h).for_each(|v, h| {
        let d = h.norm_sqr() + reg;
        if d == 0.0 {
            zero_bins += 1;
            *v = Complex64::new(0.0, 0.0);
        } else {
            *v *= h.conj() / d;
        }
    });
    if zero_bins > 0 {
        log::warn!("inverse filter: {zero_bins} spectral zeros left unrestored");
    }
    fft.inverse(&mut buf)?;
    let out = Array2::from_shape_fn((r, c), |(i, j)| buf[[i + mr, j + mc]].re);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Wiener output".into()));
    }
    Ok(out)
}

/// Per-patch Wiener restoration with the bank's PSFs at `depth` (m), blended like rendering.
pub fn restore_shift_variant(
    measurement: &Array3<f64>,
    bank: &PsfBank,
    grid: &PatchGrid,
    depth: f64,
    snr: f64,
) -> Result<Array3<f64>> {
    let (ch, fr, fc) = measurement.dim();
    if (fr, fc) != grid.frame_dims() {
        return Err(Error::DimensionMismatch {
            expected: grid.frame_dims(),
            got: (fr, fc),
        });
    }
    if ch != bank.channels() {
        return invalid(format!("frame has {ch} channels, PSF bank {}", bank.channels()));
    }
    let size = grid.size;
    let patches = (0..grid.rows * grid.cols)
        .into_par_iter()
        .map(|p| {
            let (i, j) = (p / grid.cols, p % grid.cols);
            let (angle, azimuth) = grid.field[p];
            let kernels = bank.kernels_for(angle, azimuth, &[depth])?.remove(0);
            let (r0, c0) = grid.origin(i, j);
            let w = grid.weights(i, j);
            let mut out = Array3::zeros((ch, size, size));
            for k in 0..ch {
                let m = kernels[k].dim().0.max(kernels[k].dim().1);
                // restore with context from the neighbours, then crop
                let lo_r = r0.saturating_sub(m);
                let lo_c = c0.saturating_sub(m);
                let hi_r = (r0 + size + m).min(fr);
                let hi_c = (c0 + size + m).min(fc);
                let tile = measurement.slice(s![k, lo_r..hi_r, lo_c..hi_c]).to_owned();
                let rest = wiener_deconvolve(&tile, &kernels[k], snr)?;
                let crop = rest.slice(s![r0 - lo_r..r0 - lo_r + size, c0 - lo_c..c0 - lo_c + size]);
                out.index_axis_mut(Axis(0), k).assign(&(&crop * &w));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut frame = Array3::zeros((ch, fr, fc));
    for (p, tile) in patches.iter().enumerate() {
        let (r0, c0) = grid.origin(p / grid.cols, p % grid.cols);
        let mut view = frame.slice_mut(s![.., r0..r0 + size, c0..c0 + size]);
        view += tile;
    }
    Ok(frame)
}

/// `10 log10(1 / MSE)` for intensities in [0, 1]; identical inputs give `+inf`.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() || a.is_empty() {
        return invalid("PSNR needs two non-empty frames of the same shape");
    }
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
