use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use hybrid_optics::model::{write_doe, DoeProfile, NOMINAL_WAVELENGTH};
use hybrid_optics::optimize::{concentration, optimize_doe_with, OptimizeOutput, TRACE_HEADER};
use hybrid_optics::render::io::{load_frame, log_preview, read_depth, write_image, write_png};
use hybrid_optics::render::{render_shift_variant, PatchGrid, PsfBank};
use hybrid_optics::restore::{psnr, restore_shift_variant};
use hybrid_optics::wave::{psf_lattice, read_psf_stack, write_psf_stack, OpticalSetup, PsfRecord};
use ndarray::{Array2, Array3};

use crate::config::{check_file, require_file, ExperimentConfig};
use crate::CliError;

/// Files written by a command, relative to the output directory.
pub type Outputs = Vec<PathBuf>;

const PREVIEW_DECADES: f64 = 4.0;

fn create(out: &Path, name: impl AsRef<Path>) -> Result<BufWriter<File>, CliError> {
    let p = out.join(name.as_ref());
    if let Some(parent) = p.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(p)?))
}

fn save_doe(out: &Path, name: &str, doe: &DoeProfile) -> Result<PathBuf, CliError> {
    let mut w = create(out, name)?;
    write_doe(doe, &mut w)?;
    w.flush()?;
    Ok(name.into())
}

fn save_text(out: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    let mut w = create(out, name)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(name.into())
}

fn save_frame(out: &Path, stem: &str, frame: &Array3<f64>) -> Result<Outputs, CliError> {
    let raw = format!("{stem}.wfimg");
    let mut w = create(out, &raw)?;
    write_image(frame, &mut w)?;
    w.flush()?;
    let png = format!("{stem}.png");
    write_png(&out.join(&png), &frame.mapv(|v| v.clamp(0.0, 1.0)), 16)?;
    Ok(vec![raw.into(), png.into()])
}

/// Energy centroid in sensor coordinates, mm.
fn centroid(values: &Array2<f64>, pitch: f64, offset: (f64, f64)) -> (f64, f64) {
    let (r, c) = values.dim();
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for ((i, j), &v) in values.indexed_iter() {
        sx += v * (j as f64 - (c / 2) as f64);
        sy += v * (i as f64 - (r / 2) as f64);
        s += v;
    }
    (offset.0 + pitch * sx / s, offset.1 + pitch * sy / s)
}

pub fn simulate_psf(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, CliError> {
    let setup = cfg.setup(cfg.doe.s)?;
    let doe = match &cfg.doe.path {
        Some(_) => Some(cfg.initial_doe(&setup)?),
        None => None,
    };
    let records = psf_lattice(
        &setup,
        doe.as_ref(),
        &cfg.field.angles_deg,
        &cfg.field.depths_m,
        &cfg.optics.wavelengths_um,
        &cfg.response(),
    )?;
    let mut outputs = Vec::new();
    let mut w = create(out, "psfs.wfpsf")?;
    write_psf_stack(&records, setup.pitch, &mut w)?;
    w.flush()?;
    outputs.push("psfs.wfpsf".into());

    let mut csv = String::from("index,angle_deg,depth_m,channel,concentration,centroid_x_mm,centroid_y_mm,peak\n");
    for (k, r) in records.iter().enumerate() {
        let (cx, cy) = centroid(&r.values, setup.pitch, r.offset);
        let peak = r.values.iter().copied().fold(0.0, f64::max);
        writeln!(
            csv,
            "{k},{},{},{},{:.6},{:.6e},{:.6e},{:.6e}",
            r.angle_deg,
            r.depth_m,
            r.channel,
            concentration(&r.values)?,
            cx,
            cy,
            peak
        )
        .expect("string write");
        let name = format!("previews/psf_{k:03}.png");
        let path = out.join(&name);
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        write_png(&path, &log_preview(&r.values, PREVIEW_DECADES), 8)?;
        outputs.push(name.into());
    }
    outputs.push(save_text(out, "psf_metrics.csv", &csv)?);
    Ok(outputs)
}

fn run_optimization(
    cfg: &ExperimentConfig,
    setup: &OpticalSetup,
    initial: &DoeProfile,
    out: &Path,
    prefix: &str,
) -> Result<(OptimizeOutput, Outputs), CliError> {
    let ckpt = out.join(format!("{prefix}checkpoints"));
    let ocfg = cfg.optimize_config(Some(ckpt.clone()));
    if ocfg.checkpoint_dir.is_some() {
        std::fs::create_dir_all(&ckpt)?;
    }
    let trace_name = format!("{prefix}trace.csv");
    let mut trace = create(out, &trace_name)?;
    writeln!(trace, "{TRACE_HEADER}")?;
    let every = (ocfg.iterations / 10).max(1);
    let result = optimize_doe_with(setup, &ocfg, initial, |row| {
        writeln!(trace, "{}", row.csv())?;
        if row.iter % every == 0 {
            log::info!(
                "{prefix}iter {} loss {:.4e} lr {:.2e}",
                row.iter,
                row.report.total,
                row.lr
            );
        }
        Ok(())
    });
    trace.flush()?;
    let res = result?;
    let mut outputs = vec![trace_name.into()];
    outputs.push(save_doe(out, &format!("{prefix}doe.wfdoe"), &res.doe)?);
    outputs.push(save_doe(
        out,
        &format!("{prefix}doe_continuous.wfdoe"),
        &res.continuous,
    )?);
    if ocfg.checkpoint_dir.is_some() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(&ckpt)?
            .map(|e| e.map(|e| Path::new(&format!("{prefix}checkpoints")).join(e.file_name())))
            .collect::<Result<_, _>>()?;
        names.sort();
        outputs.extend(names);
    }
    Ok((res, outputs))
}

fn point_metrics(res: &OptimizeOutput) -> Result<Vec<(f64, f64, f64, f64)>, CliError> {
    res.points
        .iter()
        .zip(&res.evaluations)
        .map(|(p, e)| {
            let c = hybrid_optics::optimize::mean_concentration(e)?;
            Ok((p.angle.to_degrees(), p.depth * 1e-3, e.l_focus, c))
        })
        .collect()
}

pub fn optimize_doe(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, CliError> {
    let setup = cfg.setup(cfg.doe.s)?;
    let initial = cfg.initial_doe(&setup)?;
    let (res, mut outputs) = run_optimization(cfg, &setup, &initial, out, "")?;
    let mut csv = String::from("angle_deg,depth_m,l_focus,concentration\n");
    for (a, d, l, c) in point_metrics(&res)? {
        writeln!(csv, "{a},{d},{l:.6e},{c:.6}").expect("string write");
    }
    outputs.push(save_text(out, "metrics.csv", &csv)?);
    Ok(outputs)
}

/// Every position starts from flat heights under the same budget and seed.
pub fn sweep_position(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, CliError> {
    let mut outputs = Vec::new();
    let mut rows = String::from("s,angle_deg,depth_m,l_focus,concentration\n");
    let mut summary = String::from("s,mean_l_focus,mean_concentration\n");
    for (k, &s) in cfg.sweep.s_list.iter().enumerate() {
        let setup = cfg.setup(s)?;
        let max = cfg.field.angles_deg.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let initial = setup.doe_for_angles(max.to_radians(), cfg.doe.radial)?;
        log::info!("sweep s = {s}");
        let (res, files) = run_optimization(cfg, &setup, &initial, out, &format!("s{k:02}_"))?;
        outputs.extend(files);
        let m = point_metrics(&res)?;
        for &(a, d, l, c) in &m {
            writeln!(rows, "{s},{a},{d},{l:.6e},{c:.6}").expect("string write");
        }
        let n = m.len() as f64;
        let ml = m.iter().map(|r| r.2).sum::<f64>() / n;
        let mc = m.iter().map(|r| r.3).sum::<f64>() / n;
        writeln!(summary, "{s},{ml:.6e},{mc:.6}").expect("string write");
    }
    outputs.push(save_text(out, "sweep.csv", &rows)?);
    outputs.push(save_text(out, "sweep_summary.csv", &summary)?);
    Ok(outputs)
}

fn load_bank(cfg: &ExperimentConfig, stack: Option<&PathBuf>) -> Result<(PsfBank, f64), CliError> {
    let setup = cfg.setup(cfg.doe.s)?;
    let focal = setup.system.paraxial(NOMINAL_WAVELENGTH)?.effective_focal_length;
    let records: Vec<PsfRecord> = match stack {
        Some(p) => read_psf_stack(BufReader::new(File::open(p)?))?.0,
        None => {
            let doe = match &cfg.doe.path {
                Some(_) => Some(cfg.initial_doe(&setup)?),
                None => None,
            };
            psf_lattice(
                &setup,
                doe.as_ref(),
                &cfg.field.angles_deg,
                &cfg.field.depths_m,
                &cfg.optics.wavelengths_um,
                &cfg.response(),
            )?
        }
    };
    Ok((PsfBank::from_records(&records)?, focal))
}

fn patch_grid(cfg: &ExperimentConfig, dims: (usize, usize), focal: f64) -> Result<PatchGrid, CliError> {
    let pitch = cfg.render.pixel_pitch_mm.unwrap_or(cfg.optics.pitch_mm);
    Ok(PatchGrid::for_frame(dims, cfg.render.patch, cfg.render.overlap)?.with_field_geometry(pitch, focal))
}

pub fn render_scene(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, CliError> {
    let r = &cfg.render;
    let image = load_frame(require_file(&r.frame, "render.frame")?)?;
    check_file(r.depth.as_ref())?;
    check_file(r.psf_stack.as_ref())?;
    let (_, rows, cols) = image.dim();
    let depth = match &r.depth {
        Some(p) => read_depth(BufReader::new(File::open(p)?))?,
        None => Array2::from_elem((rows, cols), r.constant_depth_m),
    };
    let (bank, focal) = load_bank(cfg, r.psf_stack.as_ref())?;
    let grid = patch_grid(cfg, (rows, cols), focal)?;
    let res = render_shift_variant(
        &image,
        &depth,
        r.layers,
        (r.near_m, r.far_m),
        &bank,
        &grid,
        r.noise_sigma,
        cfg.seed,
    )?;
    save_frame(out, "measurement", &res.frame)
}

pub fn deconvolve(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, CliError> {
    let d = &cfg.deconvolve;
    if !(d.snr > 0.0) {
        return Err(CliError::Config(format!("snr must be positive, got {}", d.snr)));
    }
    let meas = load_frame(require_file(&d.measurement, "deconvolve.measurement")?)?;
    check_file(d.psf_stack.as_ref())?;
    check_file(d.reference.as_ref())?;
    let (_, rows, cols) = meas.dim();
    let (bank, focal) = load_bank(cfg, d.psf_stack.as_ref())?;
    let grid = patch_grid(cfg, (rows, cols), focal)?;
    let restored = restore_shift_variant(&meas, &bank, &grid, d.depth_m, d.snr)?;
    let mut outputs = save_frame(out, "restored", &restored)?;
    if let Some(p) = &d.reference {
        let reference = load_frame(p)?;
        let before = psnr(&meas, &reference)?;
        let after = psnr(&restored, &reference)?;
        log::info!("PSNR {before:.2} dB -> {after:.2} dB");
        let csv = format!("psnr_measurement_db,psnr_restored_db\n{before:.6},{after:.6}\n");
        outputs.push(save_text(out, "psnr.csv", &csv)?);
    }
    Ok(outputs)
}
