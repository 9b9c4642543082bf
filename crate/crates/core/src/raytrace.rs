use std::io::Write;

use rayon::prelude::*;

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::field::{wavenumber, SampledField};
use crate::model::{LensMode, LensSystem, Surface};

pub type Vec3 = [f64; 3];

const NEWTON_STEPS: usize = 20;
const NEWTON_TOL: f64 = 1e-9;
const AIM_STEPS: usize = 30;
const AIM_TOL: f64 = 1e-11;

#[inline]
pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn add_scaled(a: Vec3, t: f64, d: Vec3) -> Vec3 {
    [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]]
}

#[inline]
pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    /// Accumulated optical path, mm.
    pub opl: f64,
    pub alive: bool,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        Self {
            origin,
            dir: normalize(dir),
            opl: 0.0,
            alive: true,
        }
    }

    fn kill(&mut self) {
        self.alive = false;
    }
}

/// Point source in object space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    /// Finite point at `(x, y, z)` mm.
    Point(Vec3),
    /// Source at infinity emitting a plane wave along the given direction.
    Infinite(Vec3),
}

impl Source {
    /// Field point at `angle` (radians, tilt in x) and axial `depth` mm in front of
    /// `z_ref` (usually the stop). Infinite depth gives a plane wave. The chief ray
    /// towards `(0, 0, z_ref)` has direction `(sin angle, 0, cos angle)`.
    pub fn field(angle: f64, depth: f64, z_ref: f64) -> Self {
        if depth.is_infinite() {
            Source::Infinite([angle.sin(), 0.0, angle.cos()])
        } else {
            Source::Point([-depth * angle.tan(), 0.0, z_ref - depth])
        }
    }

    pub fn mirrored_y(&self) -> Self {
        match *self {
            Source::Point(p) => Source::Point([p[0], -p[1], p[2]]),
            Source::Infinite(d) => Source::Infinite([d[0], -d[1], d[2]]),
        }
    }

    fn z(&self) -> f64 {
        match self {
            Source::Point(p) => p[2],
            Source::Infinite(_) => f64::NEG_INFINITY,
        }
    }
}

/// Traced rays at the transition plane, ordered by pupil sample (row-major).
#[derive(Debug, Clone)]
pub struct RayBundle {
    pub rays: Vec<Ray>,
    pub chief: Ray,
    pub source: Source,
    pub wavelength: f64,
    /// Axial position shared by every alive ray.
    pub plane_z: f64,
}

impl RayBundle {
    pub fn alive(&self) -> impl Iterator<Item = &Ray> {
        self.rays.iter().filter(|r| r.alive)
    }

    pub fn alive_count(&self) -> usize {
        self.alive().count()
    }
}

/// Distance along `ray` to `surface`; `None` when there is no forward intersection.
pub fn intersect(ray: &Ray, surface: &Surface) -> Option<f64> {
    let o = [ray.origin[0], ray.origin[1], ray.origin[2] - surface.z];
    let d = ray.dir;
    let t = if surface.is_flat() {
        if d[2] == 0.0 {
            return None;
        }
        -o[2] / d[2]
    } else if surface.is_simple_sphere() {
        // c |p|^2 - 2 p_z = 0, root on the vertex side
        let c = surface.curvature;
        let b = d[2] - c * dot(o, d);
        let q = c * dot(o, o) - 2.0 * o[2];
        let disc = b * b - c * q;
        if disc < 0.0 {
            return None;
        }
        let den = b + disc.sqrt();
        if den == 0.0 {
            return None;
        }
        q / den
    } else {
        newton_intersect(o, d, surface)?
    };
    if !(t > 0.0) || !t.is_finite() {
        return None;
    }
    Some(t)
}

fn newton_intersect(o: Vec3, d: Vec3, surface: &Surface) -> Option<f64> {
    if d[2] == 0.0 {
        return None;
    }
    let mut t = -o[2] / d[2];
    for _ in 0..NEWTON_STEPS {
        let p = add_scaled(o, t, d);
        let r = p[0].hypot(p[1]);
        let s = surface.sag_unchecked(r)?;
        let f = p[2] - s;
        if f.abs() < NEWTON_TOL {
            return Some(t);
        }
        let slope = surface.sag_slope(r)?;
        let dr = if r > 0.0 { (p[0] * d[0] + p[1] * d[1]) / r } else { 0.0 };
        let df = d[2] - slope * dr;
        if df == 0.0 {
            return None;
        }
        t -= f / df;
        if !t.is_finite() {
            return None;
        }
    }
    None
}

/// Unit surface normal at a point on `surface`, pointing towards +z.
pub fn surface_normal(surface: &Surface, p: Vec3) -> Option<Vec3> {
    let r = p[0].hypot(p[1]);
    let slope = surface.sag_slope(r)?;
    if r == 0.0 {
        return Some([0.0, 0.0, 1.0]);
    }
    Some(normalize([-slope * p[0] / r, -slope * p[1] / r, 1.0]))
}

/// Vector Snell refraction. `None` on total internal reflection.
pub fn refract(d: Vec3, normal: Vec3, n1: f64, n2: f64) -> Option<Vec3> {
    if n1 == n2 {
        return Some(d);
    }
    let mut n = normal;
    let mut cos_i = -dot(n, d);
    if cos_i < 0.0 {
        n = [-n[0], -n[1], -n[2]];
        cos_i = -cos_i;
    }
    let mu = n1 / n2;
    let k = 1.0 - mu * mu * (1.0 - cos_i * cos_i);
    if k < 0.0 {
        return None;
    }
    let a = mu * cos_i - k.sqrt();
    Some(normalize([
        mu * d[0] + a * n[0],
        mu * d[1] + a * n[1],
        mu * d[2] + a * n[2],
    ]))
}

/// Per-wavelength refractive indices (before surface 0, after each surface).
fn indices(system: &LensSystem, wavelength: f64) -> Result<Vec<f64>> {
    let mut n = Vec::with_capacity(system.surfaces.len() + 1);
    n.push(1.0);
    for m in &system.media {
        n.push(m.refractive_index(wavelength)?);
    }
    Ok(n)
}

/// Trace surfaces `[0, upto)`; the ray is left at surface `upto - 1` after refraction.
fn trace_surfaces(ray: &mut Ray, system: &LensSystem, n: &[f64], upto: usize) {
    for (i, s) in system.surfaces.iter().take(upto).enumerate() {
        if !ray.alive {
            return;
        }
        let Some(t) = intersect(ray, s) else {
            ray.kill();
            return;
        };
        ray.origin = add_scaled(ray.origin, t, ray.dir);
        ray.opl += n[i] * t;
        let r = ray.origin[0].hypot(ray.origin[1]);
        if r > s.semi_diameter {
            ray.kill();
            return;
        }
        if s.is_flat() {
            continue;
        }
        let Some(normal) = surface_normal(s, ray.origin) else {
            ray.kill();
            return;
        };
        match refract(ray.dir, normal, n[i], n[i + 1]) {
            Some(d) => ray.dir = d,
            None => ray.kill(),
        }
    }
}

fn to_plane(ray: &mut Ray, z: f64, n: f64) {
    if !ray.alive {
        return;
    }
    if ray.dir[2] <= 0.0 {
        ray.kill();
        return;
    }
    let t = (z - ray.origin[2]) / ray.dir[2];
    if t < 0.0 {
        ray.kill();
        return;
    }
    ray.origin = add_scaled(ray.origin, t, ray.dir);
    ray.origin[2] = z;
    ray.opl += n * t;
}

/// Launch plane for collimated sources: slightly in front of the first vertex.
/// Point sources use the first vertex plane as their aim plane.
fn launch_z(system: &LensSystem) -> f64 {
    let s0 = &system.surfaces[0];
    let front = s0.sag_unchecked(s0.semi_diameter).unwrap_or(0.0).min(0.0);
    s0.z + front - 1.0
}

fn launch(source: &Source, aim: [f64; 2], z_launch: f64) -> Ray {
    match *source {
        Source::Point(p) => Ray::new(p, [aim[0] - p[0], aim[1] - p[1], z_launch - p[2]]),
        Source::Infinite(d) => Ray::new([aim[0], aim[1], z_launch], d),
    }
}

/// Position on the stop plane for a given aim, or `None` if the ray dies first.
fn stop_hit(system: &LensSystem, n: &[f64], source: &Source, aim: [f64; 2], z_launch: f64) -> Option<[f64; 2]> {
    let mut ray = launch(source, aim, z_launch);
    let k = system.stop_index;
    trace_surfaces(&mut ray, system, n, k);
    if !ray.alive {
        return None;
    }
    let t = intersect(&ray, &system.surfaces[k])?;
    let p = add_scaled(ray.origin, t, ray.dir);
    Some([p[0], p[1]])
}

/// Aim point (on the launch plane) whose ray crosses the stop plane at `target`.
fn aim_ray(system: &LensSystem, n: &[f64], source: &Source, target: [f64; 2], z_launch: f64) -> Option<[f64; 2]> {
    let stop_z = system.stop().z;
    // straight-line guess
    let mut a = match *source {
        Source::Point(p) => {
            let w = (z_launch - p[2]) / (stop_z - p[2]);
            [p[0] + w * (target[0] - p[0]), p[1] + w * (target[1] - p[1])]
        }
        Source::Infinite(d) => {
            let t = (stop_z - z_launch) / d[2];
            [target[0] - t * d[0], target[1] - t * d[1]]
        }
    };
    if system.stop_index == 0 {
        return Some(a);
    }
    let h = 1e-6 * system.stop().semi_diameter.max(1e-3);
    for _ in 0..AIM_STEPS {
        let p = stop_hit(system, n, source, a, z_launch)?;
        let r = [p[0] - target[0], p[1] - target[1]];
        if r[0].abs().max(r[1].abs()) < AIM_TOL {
            return Some(a);
        }
        let px1 = stop_hit(system, n, source, [a[0] + h, a[1]], z_launch)?;
        let px0 = stop_hit(system, n, source, [a[0] - h, a[1]], z_launch)?;
        let py1 = stop_hit(system, n, source, [a[0], a[1] + h], z_launch)?;
        let py0 = stop_hit(system, n, source, [a[0], a[1] - h], z_launch)?;
        let j = [
            [(px1[0] - px0[0]) / (2.0 * h), (py1[0] - py0[0]) / (2.0 * h)],
            [(px1[1] - px0[1]) / (2.0 * h), (py1[1] - py0[1]) / (2.0 * h)],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        a[0] -= (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        a[1] -= (-j[1][0] * r[0] + j[0][0] * r[1]) / det;
    }
    None
}

/// Trace one ray aimed at `target` on the stop plane all the way to the transition plane.
/// Also returns the launch point's projection on the plane-wave direction (0 for point sources).
fn trace_one(system: &LensSystem, n: &[f64], source: &Source, target: [f64; 2], z_launch: f64) -> (Ray, f64) {
    let Some(a) = aim_ray(system, n, source, target, z_launch) else {
        let mut dead = launch(source, target, z_launch);
        dead.kill();
        return (dead, 0.0);
    };
    let mut ray = launch(source, a, z_launch);
    let proj = match source {
        Source::Infinite(d) => dot(ray.origin, *d),
        Source::Point(_) => 0.0,
    };
    trace_surfaces(&mut ray, system, n, system.surfaces.len());
    to_plane(&mut ray, system.transition_plane_z, *n.last().expect("non-empty"));
    (ray, proj)
}

/// Pupil sampling options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PupilSampling {
    /// Samples per axis over the sampled square.
    pub samples: usize,
    /// Half-width of the sampled square on the stop plane; defaults to the stop semi-diameter.
    pub extent: Option<f64>,
}

impl PupilSampling {
    pub fn new(samples: usize) -> Self {
        Self { samples, extent: None }
    }
}

impl Default for PupilSampling {
    fn default() -> Self {
        Self::new(64)
    }
}

/// Uniform square grid of stop-plane targets, cell-centred, clipped to the sampled radius.
pub fn pupil_grid(samples: usize, extent: f64) -> Vec<[f64; 2]> {
    let step = 2.0 * extent / samples as f64;
    let mut out = Vec::with_capacity(samples * samples);
    for i in 0..samples {
        let y = -extent + (i as f64 + 0.5) * step;
        for j in 0..samples {
            let x = -extent + (j as f64 + 0.5) * step;
            if x.hypot(y) <= extent {
                out.push([x, y]);
            }
        }
    }
    out
}

/// Trace a pupil grid from `source` to the transition plane.
pub fn trace_system(
    system: &LensSystem,
    source: &Source,
    sampling: PupilSampling,
    wavelength: f64,
) -> Result<RayBundle> {
    if system.mode != LensMode::Traced {
        return invalid("trace_system requires a traced lens system");
    }
    if sampling.samples < 8 {
        return invalid("pupil sampling needs at least 8 samples per axis");
    }
    if source.z() >= system.surfaces[0].z {
        return invalid("source must lie in front of the first surface");
    }
    let n = indices(system, wavelength)?;
    let z_launch = match source {
        Source::Infinite(_) => launch_z(system),
        Source::Point(_) => system.surfaces[0].z,
    };
    let extent = sampling.extent.unwrap_or(system.stop().semi_diameter);
    let targets = pupil_grid(sampling.samples, extent);
    let mut traced: Vec<(Ray, f64)> = targets
        .par_iter()
        .map(|&t| trace_one(system, &n, source, t, z_launch))
        .collect();
    traced.push(trace_one(system, &n, source, [0.0, 0.0], z_launch));
    // Collimated launches share one wavefront; measure paths from its most upstream point.
    let base = traced
        .iter()
        .filter(|(r, _)| r.alive)
        .map(|(_, p)| *p)
        .fold(f64::INFINITY, f64::min);
    let mut rays: Vec<Ray> = traced
        .into_iter()
        .map(|(mut r, p)| {
            r.opl += p - base;
            r
        })
        .collect();
    let chief = rays.pop().expect("pushed");
    if !rays.iter().any(|r| r.alive) && !chief.alive {
        return Err(Error::EmptyBundle);
    }
    Ok(RayBundle {
        rays,
        chief,
        source: *source,
        wavelength,
        plane_z: system.transition_plane_z,
    })
}

/// Chief ray at the transition plane (thin lens: at the lens plane, undeviated).
pub fn chief_ray(system: &LensSystem, source: &Source, wavelength: f64) -> Result<Ray> {
    match system.mode {
        LensMode::ThinLens => {
            let z = system.stop().z;
            let dir = match *source {
                Source::Point(p) => normalize([-p[0], -p[1], z - p[2]]),
                Source::Infinite(d) => d,
            };
            Ok(Ray::new([0.0, 0.0, z], dir))
        }
        LensMode::Traced => {
            let n = indices(system, wavelength)?;
            let z_launch = match source {
                Source::Infinite(_) => launch_z(system),
                Source::Point(_) => system.surfaces[0].z,
            };
            let (ray, _) = trace_one(system, &n, source, [0.0, 0.0], z_launch);
            if !ray.alive {
                return Err(Error::EmptyBundle);
            }
            Ok(ray)
        }
    }
}

/// Ideal thin-lens field at the lens plane:
/// `A exp(jk r_src) exp(-jk (x^2 + y^2) / 2f) exp(-j 2 pi (fx x + fy y))`,
/// with `A = 1` inside the stop. The last factor strips a carrier `spectrum_center`
/// (cycles/mm) analytically, before sampling. Normalized to unit energy.
pub fn thin_lens_field(
    system: &LensSystem,
    source: &Source,
    dims: (usize, usize),
    pitch: f64,
    wavelength: f64,
    spectrum_center: (f64, f64),
) -> Result<SampledField> {
    if system.mode != LensMode::ThinLens {
        return invalid("thin_lens_field requires a thin-lens system");
    }
    let f = system.focal_length.expect("validated");
    let stop = system.stop();
    let k = wavenumber(wavelength);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut field = SampledField::zeros(dims.0, dims.1, pitch, (0.0, 0.0), wavelength)?;
    let xs = field.xs();
    let ys = field.ys();
    let a2 = stop.semi_diameter * stop.semi_diameter;
    for (i, &y) in ys.iter().enumerate() {
        for (j, &x) in xs.iter().enumerate() {
            let rho2 = x * x + y * y;
            if rho2 > a2 {
                continue;
            }
            // path relative to the on-axis foot of the source, kept small for precision
            let src = match *source {
                Source::Point(p) => {
                    let dz = stop.z - p[2];
                    let dx = x - p[0];
                    let dy = y - p[1];
                    let d0 = (p[0] * p[0] + p[1] * p[1] + dz * dz).sqrt();
                    let r = (dx * dx + dy * dy + dz * dz).sqrt();
                    // r - d0 without cancellation
                    (dx * dx + dy * dy - p[0] * p[0] - p[1] * p[1]) / (r + d0)
                }
                Source::Infinite(d) => d[0] * x + d[1] * y,
            };
            let phase = k * (src - rho2 / (2.0 * f)) - two_pi * (spectrum_center.0 * x + spectrum_center.1 * y);
            field.values[[i, j]] = Complex64::from_polar(1.0, phase);
        }
    }
    let e = field.energy();
    if e == 0.0 {
        return invalid("thin-lens aperture contains no samples");
    }
    field.values.mapv_inplace(|v| v / e.sqrt());
    Ok(field)
}

/// Debug dump: `x,y,z,dx,dy,dz,opl,alive` per ray.
pub fn write_rays_csv<W: Write>(bundle: &RayBundle, mut w: W) -> Result<()> {
    writeln!(w, "x,y,z,dx,dy,dz,opl,alive")?;
    for r in &bundle.rays {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.origin[0],
            r.origin[1],
            r.origin[2],
            r.dir[0],
            r.dir[1],
            r.dir[2],
            r.opl,
            u8::from(r.alive)
        )?;
    }
    Ok(())
}
