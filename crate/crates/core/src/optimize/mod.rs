//! Losses, dynamic weighting and DOE height optimization.

mod adam;
pub mod loss;
mod run;

pub use adam::{Adam, ScheduleState};
pub use loss::{
    blur_mse, concentration, dwa_weights, focus_region, loss_focus, loss_focus_grad, loss_l1, loss_mse, total_loss,
    LossReport, LossWeights, DWA_TEMPERATURE,
};
pub use run::{
    evaluate_points, evaluate_sample, mean_concentration, optimize_doe, optimize_doe_with, write_trace, EarlyStop,
    FieldPaths, FieldPoint, Objective, OptimizeConfig, OptimizeOutput, SampleEval, TraceRow, TRACE_HEADER,
};

#[cfg(test)]
mod tests;
