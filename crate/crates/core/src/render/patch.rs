use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{add_noise, composite_clean, depth_quantize, LayeredScene};
use crate::error::{invalid, Error, Result};
use crate::wave::PsfRecord;

pub const DEFAULT_PATCH: usize = 256;
pub const DEFAULT_OVERLAP: usize = 32;

/// Overlapping square patches tiling a frame of `rows * stride + overlap` pixels per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub size: usize,
    pub overlap: usize,
    pub rows: usize,
    pub cols: usize,
    /// (field angle, azimuth) of each patch centre in rad, row-major.
    pub field: Vec<(f64, f64)>,
}

impl PatchGrid {
    pub fn new(size: usize, overlap: usize, rows: usize, cols: usize) -> Result<Self> {
        if size == 0 || 2 * overlap > size {
            return invalid(format!(
                "patch size {size} must be at least twice the overlap {overlap}"
            ));
        }
        if rows == 0 || cols == 0 {
            return invalid("patch grid must have at least one patch");
        }
        Ok(Self {
            size,
            overlap,
            rows,
            cols,
            field: vec![(0.0, 0.0); rows * cols],
        })
    }

    /// Layout covering a frame exactly; `(size - overlap)` must divide `(frame - overlap)`.
    pub fn for_frame(frame: (usize, usize), size: usize, overlap: usize) -> Result<Self> {
        if size == 0 || 2 * overlap > size {
            return invalid(format!(
                "patch size {size} must be at least twice the overlap {overlap}"
            ));
        }
        let stride = size - overlap;
        let count = |n: usize| -> Result<usize> {
            if n < size || (n - overlap) % stride != 0 {
                return invalid(format!(
                    "frame side {n} is not k * {stride} + {overlap} for patch {size} / overlap {overlap}"
                ));
            }
            Ok((n - overlap) / stride)
        };
        Self::new(size, overlap, count(frame.0)?, count(frame.1)?)
    }

    /// Field angles from the patch-centre offsets on a sensor of `pixel_pitch` mm behind a lens
    /// of focal length `focal` mm.
    pub fn with_field_geometry(mut self, pixel_pitch: f64, focal: f64) -> Self {
        let (fr, fc) = self.frame_dims();
        let (cy, cx) = (fr as f64 / 2.0, fc as f64 / 2.0);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let (r0, c0) = self.origin(i, j);
                let dy = (r0 as f64 + self.size as f64 / 2.0 - cy) * pixel_pitch;
                let dx = (c0 as f64 + self.size as f64 / 2.0 - cx) * pixel_pitch;
                let angle = (dx.hypot(dy) / focal).atan();
                let azimuth = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
                self.field[i * self.cols + j] = (angle, azimuth);
            }
        }
        self
    }

    pub fn stride(&self) -> usize {
        self.size - self.overlap
    }

    pub fn frame_dims(&self) -> (usize, usize) {
        let s = self.stride();
        (self.rows * s + self.overlap, self.cols * s + self.overlap)
    }

    /// Top-left pixel of patch `(i, j)`.
    pub fn origin(&self, i: usize, j: usize) -> (usize, usize) {
        (i * self.stride(), j * self.stride())
    }

    fn ramp(&self, index: usize, count: usize) -> Vec<f64> {
        let o = self.overlap as f64;
        (0..self.size)
            .map(|t| {
                if index > 0 && t < self.overlap {
                    (t as f64 + 0.5) / o
                } else if index + 1 < count && t >= self.stride() {
                    ((self.size - t) as f64 - 0.5) / o
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// Separable linear-ramp blend weights of patch `(i, j)`.
    pub fn weights(&self, i: usize, j: usize) -> Array2<f64> {
        let wr = self.ramp(i, self.rows);
        let wc = self.ramp(j, self.cols);
        Array2::from_shape_fn((self.size, self.size), |(a, b)| wr[a] * wc[b])
    }

    /// Pixels whose noise is drawn from patch `index`'s stream along one axis.
    fn owned(&self, index: usize, count: usize, frame: usize) -> (usize, usize) {
        let s = self.stride();
        let start = if index == 0 { 0 } else { index * s + self.overlap / 2 };
        let end = if index + 1 == count {
            frame
        } else {
            (index + 1) * s + self.overlap / 2
        };
        (start, end)
    }
}

/// PSFs indexed by field angle, depth and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfBank {
    /// Field angles, rad, ascending.
    pub angles: Vec<f64>,
    /// Object depths, m (infinite allowed).
    pub depths: Vec<f64>,
    /// `kernels[angle][depth][channel]`, computed along the +x field direction.
    pub kernels: Vec<Vec<Vec<Array2<f64>>>>,
}

impl PsfBank {
    pub fn new(angles: Vec<f64>, depths: Vec<f64>, kernels: Vec<Vec<Vec<Array2<f64>>>>) -> Result<Self> {
        if angles.is_empty() || depths.is_empty() {
            return invalid("PSF bank needs at least one angle and one depth");
        }
        if angles.windows(2).any(|w| !(w[0] < w[1])) {
            return invalid("PSF bank angles must be strictly ascending");
        }
        if kernels.len() != angles.len() || kernels.iter().any(|k| k.len() != depths.len()) {
            return invalid("PSF bank kernel table does not match its angle/depth lists");
        }
        let ch = kernels[0][0].len();
        if ch == 0 || kernels.iter().flatten().any(|k| k.len() != ch) {
            return invalid("PSF bank entries must share a non-zero channel count");
        }
        Ok(Self {
            angles,
            depths,
            kernels,
        })
    }

    /// One shift-invariant kernel set per depth.
    pub fn uniform(depths: Vec<f64>, kernels: Vec<Vec<Array2<f64>>>) -> Result<Self> {
        Self::new(vec![0.0], depths, vec![kernels])
    }

    /// Group stored PSF records by angle and depth.
    pub fn from_records(records: &[PsfRecord]) -> Result<Self> {
        let mut angles: Vec<f64> = records.iter().map(|r| r.angle_deg).collect();
        let mut depths: Vec<f64> = records.iter().map(|r| r.depth_m).collect();
        angles.sort_by(f64::total_cmp);
        angles.dedup();
        depths.sort_by(f64::total_cmp);
        depths.dedup();
        let channels = records.iter().map(|r| r.channel as usize + 1).max().unwrap_or(0);
        let mut table = vec![vec![vec![None; channels]; depths.len()]; angles.len()];
        for r in records {
            let a = angles.iter().position(|&x| x == r.angle_deg).expect("collected above");
            let d = depths.iter().position(|&x| x == r.depth_m).expect("collected above");
            table[a][d][r.channel as usize] = Some(r.values.clone());
        }
        let kernels = table
            .into_iter()
            .map(|per_depth| {
                per_depth
                    .into_iter()
                    .map(|per_ch| {
                        per_ch
                            .into_iter()
                            .collect::<Option<Vec<_>>>()
                            .ok_or_else(|| Error::Parse("PSF stack has gaps in its lattice".into()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(angles.iter().map(|a| a.to_radians()).collect(), depths, kernels)
    }

    pub fn channels(&self) -> usize {
        self.kernels[0][0].len()
    }

    /// Nearest tabulated angle; angles beyond half a spacing past either end are not covered.
    pub fn nearest_angle(&self, angle: f64) -> Result<usize> {
        let n = self.angles.len();
        if n > 1 {
            let lo = self.angles[0] - 0.5 * (self.angles[1] - self.angles[0]);
            let hi = self.angles[n - 1] + 0.5 * (self.angles[n - 1] - self.angles[n - 2]);
            if angle < lo - 1e-12 || angle > hi + 1e-12 {
                return Err(Error::MissingPsf {
                    angle_deg: angle.to_degrees(),
                });
            }
        }
        Ok((0..n)
            .min_by(|&a, &b| {
                (self.angles[a] - angle)
                    .abs()
                    .total_cmp(&(self.angles[b] - angle).abs())
            })
            .expect("non-empty"))
    }

    /// Nearest depth in diopters.
    pub fn nearest_depth(&self, depth: f64) -> usize {
        let dio = |z: f64| if z.is_infinite() { 0.0 } else { 1.0 / z };
        (0..self.depths.len())
            .min_by(|&a, &b| {
                (dio(self.depths[a]) - dio(depth))
                    .abs()
                    .total_cmp(&(dio(self.depths[b]) - dio(depth)).abs())
            })
            .expect("non-empty")
    }

    /// Kernels `[layer][channel]` for a patch, rotated to its azimuth.
    pub fn kernels_for(&self, angle: f64, azimuth: f64, layer_depths: &[f64]) -> Result<Vec<Vec<Array2<f64>>>> {
        let a = self.nearest_angle(angle)?;
        Ok(layer_depths
            .iter()
            .map(|&z| {
                self.kernels[a][self.nearest_depth(z)]
                    .iter()
                    .map(|k| rotate_kernel(k, azimuth))
                    .collect()
            })
            .collect())
    }

    fn max_dims(&self) -> (usize, usize) {
        self.kernels.iter().flatten().flatten().fold((0, 0), |acc, k| {
            let (r, c) = k.dim();
            (acc.0.max(r), acc.1.max(c))
        })
    }
}

/// Rotate a kernel by `phi` rad about its centre cell (bilinear), preserving its sum.
pub fn rotate_kernel(kernel: &Array2<f64>, phi: f64) -> Array2<f64> {
    if phi.abs() < 1e-12 {
        return kernel.clone();
    }
    let (r, c) = kernel.dim();
    let (cr, cc) = ((r / 2) as f64, (c / 2) as f64);
    let (sn, cs) = phi.sin_cos();
    let sample = |y: f64, x: f64| -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let mut v = 0.0;
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let (yy, xx) = (y0 + dy, x0 + dx);
                if yy >= 0.0 && xx >= 0.0 && (yy as usize) < r && (xx as usize) < c {
                    v += wy * wx * kernel[[yy as usize, xx as usize]];
                }
            }
        }
        v
    };
    let mut out = Array2::from_shape_fn((r, c), |(i, j)| {
        let (dy, dx) = (i as f64 - cr, j as f64 - cc);
        sample(cr - sn * dx + cs * dy, cc + cs * dx + sn * dy)
    });
    let (s0, s1) = (kernel.sum(), out.sum());
    if s1 > 0.0 {
        out.mapv_inplace(|v| v * s0 / s1);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub frame: Array3<f64>,
    /// Depth samples outside the layer range.
    pub clamped: usize,
}

fn extract_scene(scene: &LayeredScene, r0: isize, c0: isize, rows: usize, cols: usize) -> LayeredScene {
    let (fr, fc) = scene.dims();
    let ri: Vec<usize> = (0..rows)
        .map(|i| (r0 + i as isize).clamp(0, fr as isize - 1) as usize)
        .collect();
    let ci: Vec<usize> = (0..cols)
        .map(|j| (c0 + j as isize).clamp(0, fc as isize - 1) as usize)
        .collect();
    let pick2 = |a: &Array2<f64>| Array2::from_shape_fn((rows, cols), |(i, j)| a[[ri[i], ci[j]]]);
    let pick3 = |a: &Array3<f64>| Array3::from_shape_fn((a.dim().0, rows, cols), |(k, i, j)| a[[k, ri[i], ci[j]]]);
    LayeredScene {
        layers: scene.layers.iter().map(pick3).collect(),
        masks: scene.masks.iter().map(pick2).collect(),
        depths: scene.depths.clone(),
    }
}

/// Patchwise occlusion-aware rendering of an RGBD frame with locally shift-invariant PSFs.
#[allow(clippy::too_many_arguments)]
pub fn render_shift_variant(
    image: &Array3<f64>,
    depth: &Array2<f64>,
    layers: usize,
    depth_range: (f64, f64),
    bank: &PsfBank,
    grid: &PatchGrid,
    noise_sigma: f64,
    seed: u64,
) -> Result<RenderOutput> {
    let (ch, fr, fc) = image.dim();
    if (fr, fc) != grid.frame_dims() || depth.dim() != (fr, fc) {
        return Err(Error::DimensionMismatch {
            expected: grid.frame_dims(),
            got: if depth.dim() != (fr, fc) { depth.dim() } else { (fr, fc) },
        });
    }
    if ch != bank.channels() {
        return invalid(format!("frame has {ch} channels, PSF bank {}", bank.channels()));
    }
    let quant = depth_quantize(depth, layers, depth_range.0, depth_range.1)?;
    let scene = LayeredScene::from_image(image, &quant)?;
    let (kr, kc) = bank.max_dims();
    let margin = ((kr / 2 + 1) as isize, (kc / 2 + 1) as isize);
    let size = grid.size;
    let patches = (0..grid.rows * grid.cols)
        .into_par_iter()
        .map(|p| {
            let (i, j) = (p / grid.cols, p % grid.cols);
            let (angle, azimuth) = grid.field[p];
            let kernels = bank.kernels_for(angle, azimuth, &scene.depths)?;
            let (r0, c0) = grid.origin(i, j);
            let sub = extract_scene(
                &scene,
                r0 as isize - margin.0,
                c0 as isize - margin.1,
                size + 2 * margin.0 as usize,
                size + 2 * margin.1 as usize,
            );
            let out = composite_clean(&sub, &kernels)?;
            let (mr, mc) = (margin.0 as usize, margin.1 as usize);
            let mut crop = out.slice(s![.., mr..mr + size, mc..mc + size]).to_owned();
            let w = grid.weights(i, j);
            for mut plane in crop.outer_iter_mut() {
                plane *= &w;
            }
            Ok(crop)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut frame = Array3::zeros((ch, fr, fc));
    for (p, crop) in patches.iter().enumerate() {
        let (r0, c0) = grid.origin(p / grid.cols, p % grid.cols);
        let mut view = frame.slice_mut(s![.., r0..r0 + size, c0..c0 + size]);
        view += crop;
    }
    for p in 0..grid.rows * grid.cols {
        let (i, j) = (p / grid.cols, p % grid.cols);
        let (a, b) = grid.owned(i, grid.rows, fr);
        let (c, d) = grid.owned(j, grid.cols, fc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut tile = frame.slice(s![.., a..b, c..d]).to_owned();
        add_noise(&mut tile, noise_sigma, &mut rng)?;
        frame.slice_mut(s![.., a..b, c..d]).assign(&tile);
    }
    Ok(RenderOutput {
        frame,
        clamped: quant.clamped,
    })
}
