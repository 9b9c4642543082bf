use ndarray::Array2;
use num_complex::Complex64;
use spade::{DelaunayTriangulation, HasPosition, Point2, Triangulation};

use crate::error::{invalid, Error, Result};
use crate::field::{wavenumber, SampledField};
use crate::raytrace::{RayBundle, Vec3};

/// Fraction of ray energy allowed to land off-grid before assembly fails.
pub const MAX_DROPPED_FRACTION: f64 = 0.01;

/// Regular output grid on the transition plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// mm.
    pub pitch: f64,
    /// Centre of the grid, mm.
    pub origin: (f64, f64),
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, pitch: f64, origin: (f64, f64)) -> Self {
        Self {
            rows,
            cols,
            pitch,
            origin,
        }
    }

    /// Fractional (col, row) index of a physical point.
    fn index_of(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin.0) / self.pitch + (self.cols / 2) as f64,
            (y - self.origin.1) / self.pitch + (self.rows / 2) as f64,
        )
    }

    fn position(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 - (self.cols / 2) as f64) * self.pitch,
            self.origin.1 + (row as f64 - (self.rows / 2) as f64) * self.pitch,
        )
    }
}

/// Complex field on the transition plane plus the chief ray that produced it.
#[derive(Debug, Clone)]
pub struct TransitionField {
    pub field: SampledField,
    pub chief_dir: Vec3,
    pub chief_origin: Vec3,
}

struct Landing {
    pos: Point2<f64>,
    opl: f64,
}

impl HasPosition for Landing {
    type Scalar = f64;

    fn position(&self) -> Point2<f64> {
        self.pos
    }
}

/// Piecewise-linear OPL interpolation over the Delaunay triangulation of alive landings.
/// Cells outside the hull are `None`.
pub fn interpolate_opl(bundle: &RayBundle, grid: &GridSpec) -> Result<Array2<Option<f64>>> {
    let landings: Vec<Landing> = bundle
        .alive()
        .map(|r| Landing {
            pos: Point2::new(r.origin[0], r.origin[1]),
            opl: r.opl,
        })
        .collect();
    interpolate_scattered(landings, grid)
}

fn interpolate_scattered(landings: Vec<Landing>, grid: &GridSpec) -> Result<Array2<Option<f64>>> {
    if landings.len() < 3 {
        return Err(Error::DegenerateLanding);
    }
    let tri: DelaunayTriangulation<Landing> =
        DelaunayTriangulation::bulk_load_stable(landings).map_err(|_| Error::DegenerateLanding)?;
    if tri.num_inner_faces() == 0 {
        return Err(Error::DegenerateLanding);
    }
    let mut out = Array2::from_elem((grid.rows, grid.cols), None);
    for face in tri.inner_faces() {
        let v = face.vertices();
        let p: [(f64, f64, f64); 3] = std::array::from_fn(|k| {
            let d = v[k].data();
            (d.pos.x, d.pos.y, d.opl)
        });
        let det = (p[1].1 - p[2].1) * (p[0].0 - p[2].0) + (p[2].0 - p[1].0) * (p[0].1 - p[2].1);
        if det == 0.0 {
            continue;
        }
        let (xmin, xmax) = minmax(p.map(|q| q.0));
        let (ymin, ymax) = minmax(p.map(|q| q.1));
        let (c0, r0) = grid.index_of(xmin, ymin);
        let (c1, r1) = grid.index_of(xmax, ymax);
        let cs = c0.ceil().max(0.0) as usize;
        let rs = r0.ceil().max(0.0) as usize;
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        let ce = (c1.floor() as usize).min(grid.cols.saturating_sub(1));
        let re = (r1.floor() as usize).min(grid.rows.saturating_sub(1));
        let eps = 1e-12;
        for row in rs..=re {
            for col in cs..=ce {
                let (x, y) = grid.position(row, col);
                let l0 = ((p[1].1 - p[2].1) * (x - p[2].0) + (p[2].0 - p[1].0) * (y - p[2].1)) / det;
                let l1 = ((p[2].1 - p[0].1) * (x - p[2].0) + (p[0].0 - p[2].0) * (y - p[2].1)) / det;
                let l2 = 1.0 - l0 - l1;
                if l0 >= -eps && l1 >= -eps && l2 >= -eps {
                    out[[row, col]] = Some(l0 * p[0].2 + l1 * p[1].2 + l2 * p[2].2);
                }
            }
        }
    }
    Ok(out)
}

fn minmax(v: [f64; 3]) -> (f64, f64) {
    (v[0].min(v[1]).min(v[2]), v[0].max(v[1]).max(v[2]))
}

/// Splatted ray intensity and the energy that fell off the grid.
#[derive(Debug, Clone)]
pub struct Splat {
    pub intensity: Array2<f64>,
    pub deposited: f64,
    pub dropped: f64,
}

/// Deposit unit energy per alive ray, split bilinearly over the four neighbouring cells.
pub fn splat_intensity(bundle: &RayBundle, grid: &GridSpec) -> Result<Splat> {
    if bundle.alive_count() == 0 {
        return Err(Error::EmptyBundle);
    }
    Ok(splat_points(bundle.alive().map(|r| (r.origin[0], r.origin[1])), grid))
}

fn splat_points(points: impl Iterator<Item = (f64, f64)>, grid: &GridSpec) -> Splat {
    let mut intensity = Array2::zeros((grid.rows, grid.cols));
    let (mut deposited, mut dropped) = (0.0, 0.0);
    for (x, y) in points {
        let (u, v) = grid.index_of(x, y);
        let (c0, r0) = (u.floor(), v.floor());
        let (wx, wy) = (u - c0, v - r0);
        for (dr, fy) in [(0.0, 1.0 - wy), (1.0, wy)] {
            for (dc, fx) in [(0.0, 1.0 - wx), (1.0, wx)] {
                let w = fx * fy;
                if w == 0.0 {
                    continue;
                }
                let (r, c) = (r0 + dr, c0 + dc);
                if r < 0.0 || c < 0.0 || r >= grid.rows as f64 || c >= grid.cols as f64 {
                    dropped += w;
                } else {
                    intensity[[r as usize, c as usize]] += w;
                    deposited += w;
                }
            }
        }
    }
    Splat {
        intensity,
        deposited,
        dropped,
    }
}

/// `E = sqrt(I) exp(j (k OPL - 2 pi (fx x + fy y)))`, normalized to unit energy.
/// `spectrum_center` (cycles/mm) strips the carrier as the field is formed.
pub fn assemble(bundle: &RayBundle, grid: &GridSpec, spectrum_center: (f64, f64)) -> Result<TransitionField> {
    let splat = splat_intensity(bundle, grid)?;
    let total = splat.deposited + splat.dropped;
    if splat.dropped > MAX_DROPPED_FRACTION * total {
        return Err(Error::EnergyDropped {
            dropped: splat.dropped / total,
        });
    }
    if splat.dropped > 0.0 {
        log::warn!(
            "{:.3}% of ray energy landed off the transition grid",
            100.0 * splat.dropped / total
        );
    }
    let opl = interpolate_opl(bundle, grid)?;
    let k = wavenumber(bundle.wavelength);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut field = SampledField::zeros(grid.rows, grid.cols, grid.pitch, grid.origin, bundle.wavelength)?;
    let xs = field.xs();
    let ys = field.ys();
    for ((row, col), v) in field.values.indexed_iter_mut() {
        let i = splat.intensity[[row, col]];
        if i <= 0.0 {
            continue;
        }
        if let Some(l) = opl[[row, col]] {
            let phase = k * l - two_pi * (spectrum_center.0 * xs[col] + spectrum_center.1 * ys[row]);
            *v = Complex64::from_polar(i.sqrt(), phase);
        }
    }
    let e = field.energy();
    if !(e > 0.0) {
        return invalid("assembled transition field has no energy");
    }
    let s = 1.0 / e.sqrt();
    field.values.mapv_inplace(|v| v * s);
    Ok(TransitionField {
        field,
        chief_dir: bundle.chief.dir,
        chief_origin: bundle.chief.origin,
    })
}
