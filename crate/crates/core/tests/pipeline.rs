use std::io::BufReader;

use hybrid_optics::model::{DoePlacement, LensSystem};
use hybrid_optics::render::{render_shift_variant, PatchGrid, PsfBank};
use hybrid_optics::restore::{psnr, restore_shift_variant};
use hybrid_optics::wave::{default_response, psf_lattice, read_psf_stack, write_psf_stack, OpticalSetup};
use ndarray::{Array2, Array3};

fn setup() -> OpticalSetup {
    // slow lens, so the PSFs span a few pixels
    let mut s = OpticalSetup::new(
        LensSystem::thin_lens(4.0, 40.0).unwrap(),
        DoePlacement::new(0.3).unwrap(),
        64,
        0.006,
    )
    .unwrap();
    s.psf_size = 15;
    s
}

#[test]
fn simulate_store_render_restore() {
    let setup = setup();
    let wl = [0.46, 0.55, 0.64];
    let resp = default_response(&wl);
    let angles = [0.0, 4.0, 8.0];
    let depths = [f64::INFINITY];
    let records = psf_lattice(&setup, None, &angles, &depths, &wl, &resp).unwrap();
    assert_eq!(records.len(), 9);
    for r in &records {
        assert!((r.values.sum() - 1.0).abs() < 1e-9);
    }

    let mut bytes = Vec::new();
    write_psf_stack(&records, setup.pitch, &mut bytes).unwrap();
    let (back, pitch) = read_psf_stack(BufReader::new(&bytes[..])).unwrap();
    assert!((pitch - setup.pitch).abs() < 1e-12);
    assert_eq!(back.len(), records.len());
    let bank = PsfBank::from_records(&back).unwrap();
    assert_eq!(bank.channels(), 3);
    assert_eq!(bank.angles.len(), 3);

    let grid = PatchGrid::for_frame((96, 96), 40, 12)
        .unwrap()
        .with_field_geometry(0.006, 4.0);
    let truth = Array3::from_shape_fn((3, 96, 96), |(c, i, j)| {
        let bars = if ((j + 2 * c) / 4) % 2 == 0 { 0.75 } else { 0.25 };
        if (i as f64 - 48.0).hypot(j as f64 - 40.0) < 14.0 {
            0.9 - 0.2 * c as f64
        } else {
            bars
        }
    });
    let depth = Array2::from_elem((96, 96), 1e6);
    let out = render_shift_variant(&truth, &depth, 1, (0.5, 1e6), &bank, &grid, 0.0, 3).unwrap();
    assert!(out.frame.iter().all(|v| v.is_finite() && *v >= 0.0));

    // seams and frame borders set the noise floor even without sensor noise
    let restored = restore_shift_variant(&out.frame, &bank, &grid, f64::INFINITY, 1e3).unwrap();
    let before = psnr(&out.frame, &truth).unwrap();
    let after = psnr(&restored, &truth).unwrap();
    assert!(after > before + 3.0, "{before} -> {after}");
}

#[test]
fn lattice_is_deterministic() {
    let setup = setup();
    let wl = [0.55];
    let resp = Array2::ones((1, 1));
    let a = psf_lattice(&setup, None, &[0.0, 5.0], &[2.0, f64::INFINITY], &wl, &resp).unwrap();
    let b = psf_lattice(&setup, None, &[0.0, 5.0], &[2.0, f64::INFINITY], &wl, &resp).unwrap();
    assert_eq!(a, b);
    let order: Vec<(f64, f64)> = a.iter().map(|r| (r.angle_deg, r.depth_m)).collect();
    assert_eq!(
        order,
        vec![(0.0, 2.0), (0.0, f64::INFINITY), (5.0, 2.0), (5.0, f64::INFINITY)]
    );
}
