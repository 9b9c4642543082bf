use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::field::Fft2;

/// FFT convolution of images of a fixed shape with one kernel, `same` output size.
///
/// The kernel origin is its centre cell `(rows / 2, cols / 2)`; the image is extended by edge
/// replication.
#[derive(Clone)]
pub struct Convolver {
    dims: (usize, usize),
    margin: (usize, usize),
    fft: Fft2,
    spectrum: Array2<Complex64>,
}

impl Convolver {
    pub fn new(dims: (usize, usize), kernel: &Array2<f64>) -> Result<Self> {
        let (kr, kc) = kernel.dim();
        if kr == 0 || kc == 0 || dims.0 == 0 || dims.1 == 0 {
            return invalid("empty image or kernel");
        }
        let margin = (kr / 2, kc / 2);
        let padded = (dims.0 + 2 * margin.0, dims.1 + 2 * margin.1);
        let fft = Fft2::new(padded.0, padded.1);
        let mut spectrum = Array2::zeros(padded);
        for ((a, b), &v) in kernel.indexed_iter() {
            // wrap so the centre cell sits at index (0, 0)
            let i = (a as isize - margin.0 as isize).rem_euclid(padded.0 as isize) as usize;
            let j = (b as isize - margin.1 as isize).rem_euclid(padded.1 as isize) as usize;
            spectrum[[i, j]] += Complex64::new(v, 0.0);
        }
        fft.forward(&mut spectrum)?;
        Ok(Self {
            dims,
            margin,
            fft,
            spectrum,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn apply(&self, image: &Array2<f64>) -> Result<Array2<f64>> {
        if image.dim() != self.dims {
            return Err(Error::DimensionMismatch {
                expected: self.dims,
                got: image.dim(),
            });
        }
        let (r, c) = self.dims;
        let (mr, mc) = self.margin;
        let mut buf = Array2::from_shape_fn((r + 2 * mr, c + 2 * mc), |(i, j)| {
            let y = (i as isize - mr as isize).clamp(0, r as isize - 1) as usize;
            let x = (j as isize - mc as isize).clamp(0, c as isize - 1) as usize;
            Complex64::new(image[[y, x]], 0.0)
        });
        self.fft.forward(&mut buf)?;
        buf *= &self.spectrum;
        self.fft.inverse(&mut buf)?;
        Ok(Array2::from_shape_fn((r, c), |(i, j)| buf[[i + mr, j + mc]].re))
    }
}

/// One-off `same`-size convolution with edge replication.
pub fn convolve(image: &Array2<f64>, kernel: &Array2<f64>) -> Result<Array2<f64>> {
    Convolver::new(image.dim(), kernel)?.apply(image)
}
