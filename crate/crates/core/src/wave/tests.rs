use ndarray::Array2;
use num_complex::Complex64;

use super::*;
use crate::model::{DoeGradient, DoeHeights, DoePlacement, DoeProfile, LensSystem, Material};
use crate::raytrace::Source;

fn thin_setup(f: f64, fnum: f64, s: f64, grid: usize, pitch: f64) -> OpticalSetup {
    OpticalSetup::new(
        LensSystem::thin_lens(f, fnum).unwrap(),
        DoePlacement::new(s).unwrap(),
        grid,
        pitch,
    )
    .unwrap()
}

fn rel_l2(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_doe_two_step_matches_single_leg() {
    let setup = thin_setup(10.0, 10.0, 0.4, 256, 0.004);
    let src = setup.source(0.0, f64::INFINITY);
    let p = plan(&setup, &src, 0.55).unwrap();
    let doe = setup.doe_for_angles(0.0, false).unwrap();
    // smooth converging beam so nothing leaves the windows between the legs
    let mut input = crate::field::SampledField::zeros(256, 256, 0.004, (0.0, 0.0), 0.55).unwrap();
    let (xs, ys) = (input.xs(), input.ys());
    let k = crate::field::wavenumber(0.55);
    for ((r, c), v) in input.values.indexed_iter_mut() {
        let r2 = xs[c] * xs[c] + ys[r] * ys[r];
        *v = Complex64::from_polar((-r2 / 0.12f64.powi(2)).exp(), -k * r2 / (2.0 * 10.0));
    }
    let two = propagate_two_step(&input, Some(&doe), &p).unwrap();
    let one = asm_propagate(&input, p.z1 + p.z2).unwrap();
    let e = rel_l2(&two.values, &one.values);
    assert!(e < 1e-6, "{e}");
}

#[test]
fn constant_height_doe_is_a_global_phase() {
    let setup = thin_setup(10.0, 10.0, 0.3, 128, 0.008);
    let src = setup.source(3f64.to_radians(), f64::INFINITY);
    let zero = setup.doe_for_angles(3f64.to_radians(), false).unwrap();
    let mut flat = zero.clone();
    flat.params_mut().iter_mut().for_each(|h| *h = 0.21);
    let a = psf(&setup, &src, Some(&zero), 0.55).unwrap();
    let b = psf(&setup, &src, Some(&flat), 0.55).unwrap();
    assert!(max_abs_diff(&a.values, &b.values) < 1e-10);
    assert!((a.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn global_input_phase_does_not_change_the_psf() {
    let setup = thin_setup(10.0, 10.0, 0.3, 64, 0.008);
    let src = setup.source(0.0, f64::INFINITY);
    let p = plan(&setup, &src, 0.55).unwrap();
    let input = incident_field(&setup, &src, &p).unwrap();
    let mut rotated = input.clone();
    rotated.values.mapv_inplace(|v| v * Complex64::from_polar(1.0, 1.234));
    let a = propagate_two_step(&input, None, &p).unwrap().intensity();
    let b = propagate_two_step(&rotated, None, &p).unwrap().intensity();
    let peak = a.iter().copied().fold(0.0, f64::max);
    assert!(max_abs_diff(&a, &b) < 1e-12 * peak);
}

#[test]
fn finite_object_images_at_gaussian_height() {
    let (f, u, th) = (10.0, 200.0, 5f64.to_radians());
    let mut setup = thin_setup(f, 10.0, 0.24, 256, 0.004);
    let v = 1.0 / (1.0 / f - 1.0 / u);
    setup.sensor_z = v;
    let src = setup.source(th, u);
    let Source::Point(p0) = src else { unreachable!() };
    let expect = -(v / u) * p0[0];
    let doe = setup.doe_for_angles(th, false).unwrap();
    let k = psf(&setup, &src, Some(&doe), 0.55).unwrap();
    let xs: Vec<f64> = (0..256).map(|c| k.origin.0 + (c as f64 - 128.0) * 0.004).collect();
    let cx: f64 = k.values.indexed_iter().map(|((_, c), v)| v * xs[c]).sum();
    assert!((cx - expect).abs() < 0.008, "centroid {cx} vs {expect}");
    // peak sits within a pixel of the chief landing cell
    let (pr, pc) = k
        .values
        .indexed_iter()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert!((pr as isize - 128).abs() <= 1 && (pc as isize - 128).abs() <= 2);
}

#[test]
fn mirrored_source_mirrors_psf() {
    // pupil well inside the window so every row has a mirror partner
    let mut setup = thin_setup(10.0, 40.0, 0.3, 64, 0.008);
    setup.sensor_z = 10.0;
    let mut doe = setup.doe_for_angles(0.2, true).unwrap();
    for (i, h) in doe.params_mut().iter_mut().enumerate() {
        *h = ((i as f64 * 0.37).sin().abs()) * 0.5;
    }
    let src = Source::Point([0.3, 1.1, -150.0]);
    let a = psf(&setup, &src, Some(&doe), 0.55).unwrap();
    let b = psf(&setup, &src.mirrored_y(), Some(&doe), 0.55).unwrap();
    assert!((a.origin.1 + b.origin.1).abs() < 1e-12);
    // the unpaired edge row leaks diffraction tails between the legs, so not bit-exact
    let peak = a.values.iter().copied().fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for r in 1..64 {
        for c in 0..64 {
            worst = worst.max((a.values[[r, c]] - b.values[[64 - r, c]]).abs());
        }
    }
    assert!(worst < 1e-3 * peak, "{worst} vs peak {peak}");
}

#[test]
fn doe_windows_follow_the_chief_ray() {
    let h = Array2::from_shape_fn((9, 9), |(i, j)| (i * 9 + j) as f64 * 0.01);
    let doe = DoeProfile {
        heights: DoeHeights::FullGrid(h.clone()),
        pitch: 0.01,
        substrate: Material::pmma(),
        z: 1.0,
        levels: 0,
    };
    let (w, phase) = doe_window(&doe, (0.0, 0.0), (4, 4), 0.55).unwrap();
    assert_eq!(w.centre, (0, 0));
    let scale = doe.phase_scale(0.55).unwrap();
    assert!(max_abs_diff(&phase, &h.slice(ndarray::s![2..6, 2..6]).mapv(|v| v * scale)) < 1e-15);
    let (w, phase) = doe_window(&doe, (0.0101, 0.0), (4, 4), 0.55).unwrap();
    assert_eq!(w.centre, (0, 1));
    assert!(max_abs_diff(&phase, &h.slice(ndarray::s![2..6, 3..7]).mapv(|v| v * scale)) < 1e-15);
    assert!(doe_window(&doe, (0.05, 0.0), (4, 4), 0.55).is_err());
}

#[test]
fn spectral_combination() {
    let setup = thin_setup(10.0, 10.0, 0.3, 64, 0.008);
    let src = setup.source(0.0, f64::INFINITY);
    let mono = psf(&setup, &src, None, 0.55).unwrap();
    let one = spectral_psf(&setup, &src, None, &[0.55], &Array2::ones((1, 1))).unwrap();
    assert!(max_abs_diff(&one.channels[0], &mono.values) < 1e-15);

    let two = spectral_psf(&setup, &src, None, &[0.5, 0.6], &Array2::from_elem((1, 2), 0.5)).unwrap();
    let mean = (&two.monochromatic[0].values + &two.monochromatic[1].values) * 0.5;
    assert!(max_abs_diff(&two.channels[0], &mean) < 1e-15);

    let ls: Vec<f64> = (0..9).map(|i| 0.42 + 0.03 * i as f64).collect();
    let resp = default_response(&ls);
    let sp = spectral_psf(&setup, &src, None, &ls, &resp).unwrap();
    for c in 0..3 {
        let mut acc = Array2::<f64>::zeros((64, 64));
        let mut total = 0.0;
        for (k, p) in sp.monochromatic.iter().enumerate() {
            let w = (-(ls[k] - DEFAULT_WAVELENGTHS[c]).powi(2) / (2.0 * 0.03 * 0.03)).exp();
            for (a, v) in acc.iter_mut().zip(p.values.iter()) {
                *a += w * v;
            }
            total += w;
        }
        acc.mapv_inplace(|v| v / total);
        assert!(max_abs_diff(&sp.channels[c], &acc) < 1e-14);
    }
    assert!(combine_spectral(&sp.monochromatic, &Array2::zeros((1, 9))).is_err());
}

#[test]
fn psf_stack_round_trip() {
    let recs = vec![
        PsfRecord {
            angle_deg: 12.0,
            depth_m: 1.5,
            channel: 2,
            offset: (0.25, -0.125),
            values: Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 / 66.0),
        },
        PsfRecord {
            angle_deg: 0.0,
            depth_m: f64::INFINITY,
            channel: 0,
            offset: (0.0, 0.0),
            values: Array2::from_elem((3, 4), 1.0 / 12.0),
        },
    ];
    let mut buf = Vec::new();
    write_psf_stack(&recs, 0.004, &mut buf).unwrap();
    assert!(buf.starts_with(b"WFPSF 2 3 4 4\n"));
    let (back, pitch) = read_psf_stack(std::io::Cursor::new(buf)).unwrap();
    assert!((pitch - 0.004).abs() < 1e-15);
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].channel, 2);
    assert_eq!(back[1].depth_m, f64::INFINITY);
    assert!(max_abs_diff(&back[0].values, &recs[0].values) < 1e-7);
}

#[test]
fn prepared_path_matches_direct_psf() {
    let setup = thin_setup(10.0, 10.0, 0.3, 64, 0.008);
    let src = setup.source(4f64.to_radians(), f64::INFINITY);
    let mut doe = setup.doe_for_angles(4f64.to_radians(), false).unwrap();
    for (i, h) in doe.params_mut().iter_mut().enumerate() {
        *h = ((i as f64 * 0.11).cos().abs()) * 0.6;
    }
    let direct = psf(&setup, &src, Some(&doe), 0.55).unwrap();
    let path = PreparedPath::new(&setup, &src, &doe, 0.55).unwrap();
    let (p, _) = path.forward(&doe).unwrap();
    assert!(max_abs_diff(&p.values, &direct.values) < 1e-12);
}

#[test]
fn tilted_beam_compensation_matches_oversampled_reference() {
    use crate::field::{crop_array, fft_frequencies, pad_array, Fft2};
    // Converging Gaussian tilted 10 degrees, 30 mm, native 4 um vs 1 um uncompensated.
    let (n, p, l, z) = (128usize, 0.004, 0.55, 30.0);
    let th = 10f64.to_radians();
    let fc = th.sin() / (l * 1e-3);
    let k = 2.0 * std::f64::consts::PI / (l * 1e-3);
    let beam = |x: f64, y: f64| {
        let r2 = x * x + y * y;
        Complex64::from_polar((-r2 / 0.1f64.powi(2)).exp(), -k * r2 / (2.0 * 60.0))
    };
    let shift = ((z * th.tan() / p).round()) * p;
    let mut native = crate::field::SampledField::zeros(n, n, p, (0.0, 0.0), l).unwrap();
    let (xs, ys) = (native.xs(), native.ys());
    for ((r, c), v) in native.values.indexed_iter_mut() {
        *v = beam(xs[c], ys[r]);
    }
    let out = asm_propagate_to(&native, z, (fc, 0.0), (shift, 0.0)).unwrap();

    let m = 4 * n;
    let q = p / 4.0;
    let coords: Vec<f64> = (0..m).map(|i| (i as f64 - (m / 2) as f64) * q).collect();
    let u = Array2::from_shape_fn((m, m), |(r, c)| {
        beam(coords[c], coords[r]) * Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * fc * coords[c])
    });
    let fft = Fft2::new(2 * m, 2 * m);
    let mut buf = pad_array(&u, 2 * m, 2 * m);
    fft.forward(&mut buf).unwrap();
    let f = fft_frequencies(2 * m, q);
    let lm = l * 1e-3;
    for ((r, c), v) in buf.indexed_iter_mut() {
        let a = 1.0 - lm * lm * (f[c] * f[c] + f[r] * f[r]);
        *v *= if a > 0.0 {
            Complex64::from_polar(1.0, k * z * a.sqrt() + 2.0 * std::f64::consts::PI * f[c] * shift)
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
    fft.inverse(&mut buf).unwrap();
    let fine = crop_array(&buf, m, m);
    let reference = Array2::from_shape_fn((n, n), |(r, c)| {
        let (rr, cc) = (4 * r, 4 * c);
        let x = shift + coords[cc];
        fine[[rr, cc]] * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * fc * x)
    });
    let err = rel_l2(&out.values, &reference);
    assert!(err < 1e-3, "rel L2 {err}");
}

fn weighted_loss(path: &PreparedPath, doe: &DoeProfile, w: &Array2<f64>) -> f64 {
    let (p, _) = path.forward(doe).unwrap();
    p.values.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
}

fn check_gradient(radial: bool, probes: &[usize]) {
    let mut setup = thin_setup(10.0, 20.0, 0.5, 32, 0.008);
    setup.psf_size = 16;
    let th = 2f64.to_radians();
    let src = setup.source(th, f64::INFINITY);
    let mut doe = setup.doe_for_angles(th, radial).unwrap();
    for (i, h) in doe.params_mut().iter_mut().enumerate() {
        *h = ((i as f64 * 0.7).sin() * 0.5 + 0.5) * 0.4;
    }
    let w = Array2::from_shape_fn((16, 16), |(r, c)| ((r * 16 + c) as f64 * 1.3).cos());
    let path = PreparedPath::new(&setup, &src, &doe, 0.55).unwrap();
    let (p, state) = path.forward(&doe).unwrap();
    let mut grad = DoeGradient::zeros_like(&doe);
    path.backward(&doe, &p, &state, &w, &mut grad).unwrap();
    let eps = 1e-5;
    for &i in probes {
        let mut plus = doe.clone();
        plus.params_mut()[i] += eps;
        let mut minus = doe.clone();
        minus.params_mut()[i] -= eps;
        let fd = (weighted_loss(&path, &plus, &w) - weighted_loss(&path, &minus, &w)) / (2.0 * eps);
        let an = grad.as_slice()[i];
        assert!(
            (fd - an).abs() < 1e-6 * fd.abs().max(1e-3),
            "param {i}: fd {fd} vs {an}"
        );
    }
}

#[test]
fn full_grid_gradient_matches_finite_differences() {
    // DOE grid is 2 * half + 1 wide; probe cells near its centre
    let setup = thin_setup(10.0, 20.0, 0.5, 32, 0.008);
    let doe = setup.doe_for_angles(2f64.to_radians(), false).unwrap();
    let DoeHeights::FullGrid(h) = &doe.heights else {
        unreachable!()
    };
    let (rows, cols) = h.dim();
    let c = (rows / 2) * cols + cols / 2;
    check_gradient(false, &[c, c + 1, c + 3 * cols - 2, c - 5 * cols + 4]);
}

#[test]
fn radial_gradient_matches_finite_differences() {
    check_gradient(true, &[0, 1, 4, 9]);
}
