use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{DoeGradient, DoeHeights, DoePlacement, DoeProfile, LensSystem};
use crate::wave::OpticalSetup;

fn small_setup() -> OpticalSetup {
    let mut s = OpticalSetup::new(
        LensSystem::thin_lens(4.0, 12.0).unwrap(),
        DoePlacement::new(0.4).unwrap(),
        64,
        0.006,
    )
    .unwrap();
    s.psf_size = 32;
    s
}

fn textured_doe(setup: &OpticalSetup, max_angle: f64, radial: bool) -> DoeProfile {
    let mut doe = setup.doe_for_angles(max_angle, radial).unwrap();
    let hm = doe.h_max();
    for (i, h) in doe.params_mut().iter_mut().enumerate() {
        *h = hm * (0.5 + 0.4 * (i as f64 * 0.37).sin());
    }
    doe
}

fn objective_value(fp: &FieldPaths, doe: &DoeProfile, obj: &Objective, c: [f64; 4]) -> f64 {
    let e = evaluate_sample(fp, doe, obj, c, None).unwrap();
    c[0] * e.l_mse + c[3] * e.l_focus
}

fn directional_errors(angle_deg: f64, obj: &Objective, c: [f64; 4], directions: usize, seed: u64) -> Vec<f64> {
    let setup = small_setup();
    let th = angle_deg.to_radians();
    let doe = textured_doe(&setup, th, false);
    let fp = FieldPaths::new(
        &setup,
        FieldPoint {
            angle: th,
            depth: f64::INFINITY,
        },
        &doe,
        &obj.wavelengths,
    )
    .unwrap();
    let mut g = DoeGradient::zeros_like(&doe);
    evaluate_sample(&fp, &doe, obj, c, Some(&mut g)).unwrap();
    let eps = 1e-4 * doe.h_max();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..directions)
        .map(|_| {
            let v: Vec<f64> = (0..doe.params().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let an: f64 = v.iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
            let shifted = |s: f64| {
                let mut d = doe.clone();
                d.params_mut().iter_mut().zip(&v).for_each(|(h, dv)| *h += s * eps * dv);
                objective_value(&fp, &d, obj, c)
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
            (an - fd).abs() / fd.abs().max(1e-12)
        })
        .collect()
}

#[test]
fn focus_gradient_matches_central_differences() {
    let obj = Objective::monochromatic(0.55);
    for (k, angle) in [0.0, 15.0, 25.0].into_iter().enumerate() {
        let errs = directional_errors(angle, &obj, [0.0, 0.0, 0.0, 1.0], 20, k as u64);
        let worst = errs.iter().copied().fold(0.0, f64::max);
        assert!(worst < 1e-3, "{angle} deg: worst rel error {worst}");
    }
}

#[test]
fn spectral_mse_gradient_matches_central_differences() {
    let wl = vec![0.5, 0.55, 0.6];
    let obj = Objective {
        response: crate::wave::default_response(&wl),
        wavelengths: wl,
        target: Some(Array3::from_shape_fn((3, 24, 24), |(c, i, j)| {
            if (i / 6 + j / 6 + c) % 2 == 0 {
                0.9
            } else {
                0.1
            }
        })),
    };
    let errs = directional_errors(10.0, &obj, [1.0, 0.0, 0.0, 0.3], 6, 7);
    let worst = errs.iter().copied().fold(0.0, f64::max);
    assert!(worst < 1e-3, "worst rel error {worst}");
}

#[test]
fn zero_weights_give_zero_gradient() {
    let setup = small_setup();
    let doe = textured_doe(&setup, 0.1, false);
    let obj = Objective::monochromatic(0.55);
    let fp = FieldPaths::new(
        &setup,
        FieldPoint {
            angle: 0.1,
            depth: f64::INFINITY,
        },
        &doe,
        &[0.55],
    )
    .unwrap();
    let mut g = DoeGradient::zeros_like(&doe);
    evaluate_sample(&fp, &doe, &obj, [0.0; 4], Some(&mut g)).unwrap();
    assert!(g.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn radial_gradient_is_ring_sum_of_grid_gradient() {
    let setup = small_setup();
    let th = 8f64.to_radians();
    let radial = textured_doe(&setup, th, true);
    let grid_shape = setup.doe_for_angles(th, false).unwrap();
    let DoeHeights::FullGrid(shape) = &grid_shape.heights else {
        unreachable!()
    };
    let (rows, cols) = shape.dim();
    let expanded = radial.radial_expand(rows, cols, radial.pitch).unwrap();
    let full = DoeProfile {
        heights: DoeHeights::FullGrid(expanded),
        ..radial.clone()
    };
    let obj = Objective::monochromatic(0.55);
    let pt = FieldPoint {
        angle: th,
        depth: 500.0,
    };
    let c = [0.0, 0.0, 0.0, 1.0];
    let grad_of = |doe: &DoeProfile| {
        let fp = FieldPaths::new(&setup, pt, doe, &[0.55]).unwrap();
        let mut g = DoeGradient::zeros_like(doe);
        evaluate_sample(&fp, doe, &obj, c, Some(&mut g)).unwrap();
        g
    };
    let gr = grad_of(&radial);
    let DoeGradient::FullGrid(gf) = grad_of(&full) else {
        unreachable!()
    };
    let DoeHeights::Radial(p) = &radial.heights else {
        unreachable!()
    };
    let mut ring = vec![0.0; p.len()];
    let last = p.len() - 1;
    for ((i, j), v) in gf.indexed_iter() {
        let u = (i as f64 - (rows / 2) as f64).hypot(j as f64 - (cols / 2) as f64);
        let k = (u.floor() as usize).min(last);
        let w = u - k as f64;
        if k < last {
            ring[k] += (1.0 - w) * v;
            ring[k + 1] += w * v;
        } else {
            ring[k] += v;
        }
    }
    let scale = ring.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for (a, b) in ring.iter().zip(gr.as_slice()) {
        assert!((a - b).abs() <= 1e-6 * scale.max(1.0), "{a} vs {b}");
    }
}

fn quick_config() -> OptimizeConfig {
    OptimizeConfig {
        angles: vec![0.0, 5f64.to_radians(), 10f64.to_radians()],
        iterations: 6,
        anneal_start: 1,
        lr: 0.05,
        seed: 11,
        ..OptimizeConfig::default()
    }
}

#[test]
fn zero_weight_run_leaves_heights_unchanged() {
    let setup = small_setup();
    let doe = textured_doe(&setup, 10f64.to_radians(), false);
    let cfg = OptimizeConfig {
        weights: LossWeights([0.0; 4]),
        levels: 0,
        ..quick_config()
    };
    let out = optimize_doe(&setup, &cfg, &doe).unwrap();
    assert_eq!(out.continuous.params(), doe.params());
    assert!(out.trace.iter().all(|r| r.report.total == 0.0));
}

#[test]
fn seeded_runs_are_identical_and_clamped() {
    let setup = small_setup();
    let doe = setup.doe_for_angles(10f64.to_radians(), false).unwrap();
    let a = optimize_doe(&setup, &quick_config(), &doe).unwrap();
    let b = optimize_doe(&setup, &quick_config(), &doe).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.continuous.params(), b.continuous.params());
    let hm = a.continuous.h_max();
    assert!(a.continuous.params().iter().all(|&h| (0.0..=hm).contains(&h)));
    assert_eq!(a.doe.levels, 16);
    // three angles, two per iteration: epochs of two iterations
    assert_eq!(
        a.trace.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        vec![0, 0, 1, 1, 2, 2]
    );
    let mut csv = Vec::new();
    write_trace(&a.trace, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with(TRACE_HEADER));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn checkpoints_and_early_stop() {
    let setup = small_setup();
    let doe = setup.doe_for_angles(10f64.to_radians(), false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = OptimizeConfig {
        weights: LossWeights([0.0; 4]),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        early_stop: Some(EarlyStop {
            patience: 1,
            min_delta: 0.0,
        }),
        ..quick_config()
    };
    let out = optimize_doe(&setup, &cfg, &doe).unwrap();
    // the first epoch sets the best value, the second is stale
    assert_eq!(out.trace.len(), 4);
    assert!(dir.path().join("doe_epoch0001.wfdoe").exists());
}

#[test]
fn config_validation() {
    let mut cfg = quick_config();
    cfg.angles.clear();
    assert!(cfg.validate().is_err());
    let mut cfg = quick_config();
    cfg.objective.response = Array2::ones((1, 2));
    assert!(cfg.validate().is_err());
    let mut cfg = quick_config();
    cfg.levels = 1;
    assert!(cfg.validate().is_err());
}
