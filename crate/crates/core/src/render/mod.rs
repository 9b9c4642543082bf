//! Occlusion-aware layered image formation and patchwise shift-variant rendering.
//!
//! Images are `(channels, rows, cols)` arrays of linear intensity.

mod conv;
pub mod io;
mod patch;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};

pub use conv::{convolve, Convolver};
pub use patch::{
    render_shift_variant, rotate_kernel, PatchGrid, PsfBank, RenderOutput, DEFAULT_OVERLAP, DEFAULT_PATCH,
};

/// Lower clamp on the normalization `U_d`.
pub const U_EPS: f64 = 1e-6;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
pub const DEFAULT_LAYERS: usize = 6;

/// Depth layers, index 0 farthest.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredScene {
    pub layers: Vec<Array3<f64>>,
    pub masks: Vec<Array2<f64>>,
    /// Representative depth per layer, m.
    pub depths: Vec<f64>,
}

impl LayeredScene {
    /// Split an image into the layers of `quant`.
    pub fn from_image(image: &Array3<f64>, quant: &DepthLayers) -> Result<Self> {
        let dims = (image.dim().1, image.dim().2);
        let layers = quant
            .masks
            .iter()
            .map(|m| {
                if m.dim() != dims {
                    return Err(Error::DimensionMismatch {
                        expected: dims,
                        got: m.dim(),
                    });
                }
                let mut l = image.clone();
                for mut ch in l.outer_iter_mut() {
                    ch *= m;
                }
                Ok(l)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            masks: quant.masks.clone(),
            depths: quant.depths.clone(),
        })
    }

    pub fn channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.dim().0)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.masks.first().map_or((0, 0), |m| m.dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return invalid("scene has no depth layers");
        }
        if self.layers.len() != self.masks.len() || self.layers.len() != self.depths.len() {
            return invalid("layers, masks and depths must have equal counts");
        }
        let dims = self.dims();
        let ch = self.channels();
        for (l, m) in self.layers.iter().zip(&self.masks) {
            if m.dim() != dims || (l.dim().1, l.dim().2) != dims || l.dim().0 != ch {
                return invalid("layer shapes differ");
            }
        }
        Ok(())
    }
}

/// Per-layer masks from a depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLayers {
    pub masks: Vec<Array2<f64>>,
    /// Layer centre in diopters, converted back to m.
    pub depths: Vec<f64>,
    /// Pixels outside the range, assigned to the nearest end layer.
    pub clamped: usize,
}

/// Layer centres, m, for `layers` uniform-diopter bins over `[near, far]`.
pub fn layer_depths(layers: usize, near: f64, far: f64) -> Result<Vec<f64>> {
    check_range(layers, near, far)?;
    let (d0, d1) = (1.0 / far, 1.0 / near);
    let step = (d1 - d0) / layers as f64;
    Ok((0..layers).map(|i| 1.0 / (d0 + (i as f64 + 0.5) * step)).collect())
}

fn check_range(layers: usize, near: f64, far: f64) -> Result<()> {
    if layers == 0 {
        return invalid("at least one depth layer is required");
    }
    if !(near > 0.0 && near < far) {
        return invalid(format!("depth range must satisfy 0 < near < far, got [{near}, {far}]"));
    }
    Ok(())
}

/// Quantize a depth map (m) into `layers` bins uniform in diopters; layer 0 is the farthest.
pub fn depth_quantize(depth: &Array2<f64>, layers: usize, near: f64, far: f64) -> Result<DepthLayers> {
    check_range(layers, near, far)?;
    let (d0, d1) = (1.0 / far, 1.0 / near);
    let step = (d1 - d0) / layers as f64;
    let mut masks = vec![Array2::zeros(depth.dim()); layers];
    let mut clamped = 0;
    for (idx, &z) in depth.indexed_iter() {
        if !(z > 0.0) {
            return Err(Error::NonFinite(format!("depth {z} at {idx:?}")));
        }
        if z < near || z > far {
            clamped += 1;
        }
        let k = ((1.0 / z - d0) / step).floor();
        let k = (k.max(0.0) as usize).min(layers - 1);
        masks[k][idx] = 1.0;
    }
    if clamped > 0 {
        log::info!("{clamped} depth samples outside [{near}, {far}] m clamped");
    }
    Ok(DepthLayers {
        masks,
        depths: layer_depths(layers, near, far)?,
        clamped,
    })
}

/// Noise-free occlusion-aware composite; `psfs[d][c]` is the kernel of layer `d`, channel `c`.
pub(crate) fn composite_clean(scene: &LayeredScene, psfs: &[Vec<Array2<f64>>]) -> Result<Array3<f64>> {
    scene.validate()?;
    let n = scene.layers.len();
    if psfs.len() != n {
        return invalid(format!("{} PSF sets for {} depth layers", psfs.len(), n));
    }
    let ch = scene.channels();
    if let Some(bad) = psfs.iter().find(|k| k.len() != ch) {
        return invalid(format!("PSF set has {} channels, scene has {ch}", bad.len()));
    }
    let dims = scene.dims();
    let mut out = Array3::zeros((ch, dims.0, dims.1));
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = Array2::<f64>::zeros(dims);
    for m in &scene.masks {
        acc += m;
        cumulative.push(acc.clone());
    }
    for c in 0..ch {
        // front to back: transmittance of everything nearer than the current layer
        let mut trans = Array2::<f64>::ones(dims);
        let mut plane = out.index_axis_mut(Axis(0), c);
        for d in (0..n).rev() {
            let conv = Convolver::new(dims, &psfs[d][c])?;
            let u = conv.apply(&cumulative[d])?.mapv(|v| v.max(U_EPS));
            let blurred = conv.apply(&scene.layers[d].index_axis(Axis(0), c).to_owned())?;
            let alpha = conv.apply(&scene.masks[d])?;
            ndarray::Zip::from(&mut plane)
                .and(&trans)
                .and(&blurred)
                .and(&u)
                .for_each(|o, &t, &b, &u| *o += t * b / u);
            ndarray::Zip::from(&mut trans)
                .and(&alpha)
                .and(&u)
                .for_each(|t, &a, &u| *t *= 1.0 - a / u);
        }
    }
    Ok(out)
}

/// Add `N(0, sigma^2)` noise and clip at zero.
pub fn add_noise<R: Rng + ?Sized>(image: &mut Array3<f64>, sigma: f64, rng: &mut R) -> Result<()> {
    if sigma < 0.0 || !sigma.is_finite() {
        return invalid(format!("noise sigma must be >= 0, got {sigma}"));
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        image.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    image.mapv_inplace(|v| v.max(0.0));
    Ok(())
}

/// `sum_d (K_d * I_d) / U_d * prod_{d' > d} (1 - (K_d' * a_d') / U_d') + N`, clipped at zero.
pub fn occlusion_composite<R: Rng + ?Sized>(
    scene: &LayeredScene,
    psfs: &[Vec<Array2<f64>>],
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Array3<f64>> {
    let mut out = composite_clean(scene, psfs)?;
    add_noise(&mut out, noise_sigma, rng)?;
    Ok(out)
}
