use std::io::Write;
use std::path::PathBuf;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{Adam, ScheduleState};
use super::loss::{
    blur_mse, concentration, dwa_weights, loss_focus, loss_focus_grad, total_loss, LossReport, LossWeights,
    DWA_TEMPERATURE,
};
use crate::error::{invalid, Error, Result};
use crate::model::{write_doe, DoeGradient, DoeProfile};
use crate::wave::{psf, OpticalSetup, PreparedPath, Psf};

/// What the PSFs are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub wavelengths: Vec<f64>,
    /// `channels x wavelengths` spectral response.
    pub response: Array2<f64>,
    /// Optional `(channels, rows, cols)` patch for the blur MSE term.
    pub target: Option<Array3<f64>>,
}

impl Objective {
    pub fn monochromatic(wavelength: f64) -> Self {
        Self {
            wavelengths: vec![wavelength],
            response: Array2::ones((1, 1)),
            target: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.wavelengths.is_empty() || self.response.ncols() != self.wavelengths.len() {
            return invalid("response must have one column per wavelength");
        }
        if self.response.nrows() == 0 || self.response.outer_iter().any(|r| !(r.sum() > 0.0)) {
            return invalid("every response channel needs positive weight");
        }
        if let Some(t) = &self.target {
            if t.dim().0 != self.response.nrows() {
                return invalid(format!(
                    "target has {} channels, response {}",
                    t.dim().0,
                    self.response.nrows()
                ));
            }
        }
        Ok(())
    }

    /// Row-normalized response.
    fn mixing(&self) -> Array2<f64> {
        let mut m = self.response.clone();
        for mut row in m.outer_iter_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        m
    }

    fn channels(&self, mono: &[&Array2<f64>]) -> Vec<Array2<f64>> {
        self.mixing()
            .outer_iter()
            .map(|row| {
                let mut acc = Array2::zeros(mono[0].dim());
                for (w, p) in row.iter().zip(mono) {
                    acc.scaled_add(*w, *p);
                }
                acc
            })
            .collect()
    }

    /// Losses of channel PSFs and, if any weight is active, `dL/dP_c` per channel.
    fn score(&self, channels: &[Array2<f64>], c: [f64; 4]) -> Result<(f64, f64, Vec<Array2<f64>>)> {
        let n = channels.len() as f64;
        let dims = channels[0].dim();
        let mut l_focus = 0.0;
        let mut l_mse = 0.0;
        let focus_grad = loss_focus_grad(dims);
        let mut grads = Vec::with_capacity(channels.len());
        for (k, p) in channels.iter().enumerate() {
            l_focus += loss_focus(p)? / n;
            let mut g = &focus_grad * (c[3] / n);
            if let Some(t) = &self.target {
                let (l, gm) = blur_mse(p, &t.index_axis(Axis(0), k).to_owned())?;
                l_mse += l / n;
                g.scaled_add(c[0] / n, &gm);
            }
            grads.push(g);
        }
        Ok((l_mse, l_focus, grads))
    }
}

/// Field point: angle in rad, object distance in mm (infinite for a plane wave).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldPoint {
    pub angle: f64,
    pub depth: f64,
}

/// Height-independent propagation of one field point at every wavelength.
#[derive(Debug, Clone)]
pub struct FieldPaths {
    pub point: FieldPoint,
    paths: Vec<PreparedPath>,
}

impl FieldPaths {
    pub fn new(setup: &OpticalSetup, point: FieldPoint, doe: &DoeProfile, wavelengths: &[f64]) -> Result<Self> {
        let src = setup.source(point.angle, point.depth);
        let paths = wavelengths
            .iter()
            .map(|&l| PreparedPath::new(setup, &src, doe, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { point, paths })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub l_mse: f64,
    pub l_focus: f64,
    /// Per-channel PSFs.
    pub channels: Vec<Array2<f64>>,
}

/// Forward one field point with the given (unquantized) heights; with `grad`, also
/// accumulate `d(c0 L_mse + c3 L_focus)/dh`.
pub fn evaluate_sample(
    fp: &FieldPaths,
    doe: &DoeProfile,
    objective: &Objective,
    c: [f64; 4],
    grad: Option<&mut DoeGradient>,
) -> Result<SampleEval> {
    let fwd = fp.paths.iter().map(|p| p.forward(doe)).collect::<Result<Vec<_>>>()?;
    let mono: Vec<&Array2<f64>> = fwd.iter().map(|(p, _)| &p.values).collect();
    let channels = objective.channels(&mono);
    let (l_mse, l_focus, gc) = objective.score(&channels, c)?;
    if let Some(grad) = grad {
        if c[0] != 0.0 || c[3] != 0.0 {
            let mix = objective.mixing();
            for (k, (path, (psf, state))) in fp.paths.iter().zip(&fwd).enumerate() {
                let mut g = Array2::zeros(psf.values.dim());
                for (ch, gch) in gc.iter().enumerate() {
                    g.scaled_add(mix[[ch, k]], gch);
                }
                path.backward(doe, psf, state, &g, grad)?;
            }
        }
    }
    Ok(SampleEval {
        l_mse,
        l_focus,
        channels,
    })
}

/// Score quantized heights through the full PSF pipeline.
pub fn evaluate_points(
    setup: &OpticalSetup,
    doe: &DoeProfile,
    points: &[FieldPoint],
    objective: &Objective,
) -> Result<Vec<SampleEval>> {
    objective.validate()?;
    points
        .par_iter()
        .map(|pt| {
            let src = setup.source(pt.angle, pt.depth);
            let mono = objective
                .wavelengths
                .iter()
                .map(|&l| psf(setup, &src, Some(doe), l))
                .collect::<Result<Vec<Psf>>>()?;
            let refs: Vec<&Array2<f64>> = mono.iter().map(|p| &p.values).collect();
            let channels = objective.channels(&refs);
            let (l_mse, l_focus, _) = objective.score(&channels, [0.0; 4])?;
            Ok(SampleEval {
                l_mse,
                l_focus,
                channels,
            })
        })
        .collect()
}

/// Mean energy inside the focus circle over channels.
pub fn mean_concentration(eval: &SampleEval) -> Result<f64> {
    let n = eval.channels.len() as f64;
    eval.channels.iter().map(|p| concentration(p).map(|c| c / n)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeConfig {
    /// Field angles, rad.
    pub angles: Vec<f64>,
    /// Object distances, mm.
    pub depths: Vec<f64>,
    pub objective: Objective,
    pub weights: LossWeights,
    pub dwa: bool,
    pub dwa_temperature: f64,
    pub iterations: usize,
    pub angles_per_iteration: usize,
    /// Height step scale, um.
    pub lr: f64,
    pub anneal_start: usize,
    pub lr_floor: f64,
    pub levels: u32,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            angles: vec![0.0],
            depths: vec![f64::INFINITY],
            objective: Objective::monochromatic(crate::model::NOMINAL_WAVELENGTH),
            weights: LossWeights::focus_only(),
            dwa: true,
            dwa_temperature: DWA_TEMPERATURE,
            iterations: 300,
            angles_per_iteration: 2,
            lr: 6e-3,
            anneal_start: 35,
            lr_floor: 0.1,
            levels: 16,
            seed: 0,
            early_stop: None,
            checkpoint_dir: None,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.angles.is_empty() || self.depths.is_empty() {
            return invalid("angle and depth lists must be non-empty");
        }
        if self.angles_per_iteration == 0 {
            return invalid("at least one angle per iteration");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.lr_floor) {
            return invalid("learning rate must be >= 0 and the floor within [0, 1]");
        }
        if self.levels == 1 {
            return invalid("quantization needs at least 2 levels (0 disables it)");
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<FieldPoint> {
        self.angles
            .iter()
            .flat_map(|&angle| self.depths.iter().map(move |&depth| FieldPoint { angle, depth }))
            .collect()
    }

    fn iterations_per_epoch(&self) -> usize {
        self.angles.len().div_ceil(self.angles_per_iteration)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

pub const TRACE_HEADER: &str = "iter,epoch,lr,l_mse,l_l1,l_focus,c0,c1,c2,c3,total";

impl TraceRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{:e},{:e},{:e},{:e},{},{},{},{},{:e}",
            self.iter,
            self.epoch,
            self.lr,
            r.l_mse,
            r.l_1,
            r.l_focus,
            r.weights[0],
            r.weights[1],
            r.weights[2],
            r.weights[3],
            r.total
        )
    }
}

pub fn write_trace<W: Write>(rows: &[TraceRow], mut w: W) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct OptimizeOutput {
    /// Continuous heights at the end of the run.
    pub continuous: DoeProfile,
    /// The quantized profile that is reported and saved.
    pub doe: DoeProfile,
    pub trace: Vec<TraceRow>,
    /// Losses of the quantized system averaged over every field point.
    pub final_report: LossReport,
    pub points: Vec<FieldPoint>,
    pub evaluations: Vec<SampleEval>,
}

const TASK_SLOTS: [usize; 3] = [0, 2, 3];

fn dynamic_weights(cfg: &OptimizeConfig, history: &[Vec<f64>]) -> [f64; 4] {
    let mut dynamic = [1.0; 4];
    if !cfg.dwa {
        return dynamic;
    }
    let active: Vec<usize> = (0..3).filter(|&i| cfg.weights.0[TASK_SLOTS[i]] != 0.0).collect();
    let hist: Vec<Vec<f64>> = active.iter().map(|&i| history[i].clone()).collect();
    for (w, &i) in dwa_weights(&hist, cfg.dwa_temperature).iter().zip(&active) {
        dynamic[TASK_SLOTS[i]] = *w;
    }
    dynamic
}

fn average_report(evals: &[SampleEval], weights: LossWeights, dynamic: [f64; 4]) -> Result<LossReport> {
    let n = evals.len() as f64;
    let mse = evals.iter().map(|e| e.l_mse).sum::<f64>() / n;
    let focus = evals.iter().map(|e| e.l_focus).sum::<f64>() / n;
    // no depth head: the L1 term has nothing to compare
    total_loss(mse, 0.0, focus, weights, dynamic)
}

pub fn optimize_doe(setup: &OpticalSetup, cfg: &OptimizeConfig, initial: &DoeProfile) -> Result<OptimizeOutput> {
    optimize_doe_with(setup, cfg, initial, |_| Ok(()))
}

/// As [`optimize_doe`], calling `observe` after every iteration (including a diverged one).
pub fn optimize_doe_with<F>(
    setup: &OpticalSetup,
    cfg: &OptimizeConfig,
    initial: &DoeProfile,
    mut observe: F,
) -> Result<OptimizeOutput>
where
    F: FnMut(&TraceRow) -> Result<()>,
{
    cfg.validate()?;
    initial.validate()?;
    let mut doe = initial.clone();
    doe.levels = 0;
    let points = cfg.points();
    let paths = points
        .par_iter()
        .map(|&pt| FieldPaths::new(setup, pt, &doe, &cfg.objective.wavelengths))
        .collect::<Result<Vec<_>>>()?;
    let per_epoch = cfg.iterations_per_epoch();
    let mut schedule = ScheduleState {
        epoch: 0,
        base_lr: cfg.lr,
        base_lr_aux: 0.0,
        anneal_start: cfg.anneal_start,
        floor: cfg.lr_floor,
        total_epochs: cfg.iterations.div_ceil(per_epoch),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(doe.params().len());
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let mut epoch_sum = [0.0; 4];
    let mut epoch_count = 0usize;
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut order: Vec<usize> = Vec::new();
    let mut dynamic = [1.0; 4];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let depth_count = cfg.depths.len();

    for iter in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..cfg.angles.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
            dynamic = dynamic_weights(cfg, &history);
        }
        let take = cfg.angles_per_iteration.min(order.len());
        let chosen: Vec<usize> = (0..take).map(|_| order.pop().expect("non-empty")).collect();
        let epoch = iter / per_epoch;
        schedule.epoch = epoch;
        let lr = schedule.lr();
        let c: [f64; 4] = std::array::from_fn(|i| cfg.weights.0[i] * dynamic[i]);

        let samples: Vec<&FieldPaths> = chosen
            .iter()
            .flat_map(|&a| paths[a * depth_count..(a + 1) * depth_count].iter())
            .collect();
        let results = samples
            .par_iter()
            .map(|fp| {
                let mut g = DoeGradient::zeros_like(&doe);
                let e = evaluate_sample(fp, &doe, &cfg.objective, c, Some(&mut g))?;
                Ok((e, g))
            })
            .collect::<Result<Vec<_>>>();
        let results = match results {
            Err(Error::NonFinite(_)) => {
                let row = TraceRow {
                    iter,
                    epoch,
                    lr,
                    report: LossReport {
                        l_mse: f64::NAN,
                        l_1: 0.0,
                        l_focus: f64::NAN,
                        weights: c,
                        total: f64::NAN,
                    },
                };
                observe(&row)?;
                return Err(Error::Diverged { iteration: iter });
            }
            other => other?,
        };
        let mut grad = DoeGradient::zeros_like(&doe);
        for (_, g) in &results {
            grad.add_assign(g);
        }
        let n = results.len() as f64;
        grad.as_mut_slice().iter_mut().for_each(|g| *g /= n);
        let evals: Vec<SampleEval> = results.into_iter().map(|(e, _)| e).collect();
        let report = average_report(&evals, cfg.weights, dynamic)?;
        let row = TraceRow {
            iter,
            epoch,
            lr,
            report,
        };
        observe(&row)?;
        trace.push(row);
        if !report.total.is_finite() {
            return Err(Error::Diverged { iteration: iter });
        }

        adam.step(doe.params_mut(), grad.as_slice(), lr);
        doe.clamp();

        epoch_sum[0] += report.l_mse;
        epoch_sum[1] += report.l_1;
        epoch_sum[2] += report.l_focus;
        epoch_sum[3] += report.total;
        epoch_count += 1;
        let epoch_done = (iter + 1) % per_epoch == 0 || iter + 1 == cfg.iterations;
        if epoch_done {
            let k = epoch_count as f64;
            for (h, s) in history.iter_mut().zip(epoch_sum) {
                h.push(s / k);
            }
            let mean_total = epoch_sum[3] / k;
            epoch_sum = [0.0; 4];
            epoch_count = 0;
            order.clear();
            if let Some(dir) = &cfg.checkpoint_dir {
                let f = std::fs::File::create(dir.join(format!("doe_epoch{epoch:04}.wfdoe")))?;
                write_doe(&doe, std::io::BufWriter::new(f))?;
            }
            if let Some(stop) = cfg.early_stop {
                if mean_total < best - stop.min_delta {
                    best = mean_total;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= stop.patience {
                        log::info!("early stop after epoch {epoch}");
                        break;
                    }
                }
            }
        }
    }

    let continuous = doe.clone();
    let mut fab = doe;
    fab.levels = cfg.levels;
    let fab = fab.quantized()?;
    let evaluations = evaluate_points(setup, &fab, &points, &cfg.objective)?;
    let final_report = average_report(&evaluations, cfg.weights, [1.0; 4])?;
    Ok(OptimizeOutput {
        continuous,
        doe: fab,
        trace,
        final_report,
        points,
        evaluations,
    })
}
