use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::train::{train, MetricsTrace};
use crate::clustering::StopRule;
use crate::error::{Error, Result};

/// Final metrics of one radius in a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub tau: f64,
    pub target_accuracy: f64,
    /// Mean groups per training image, averaged over domains.
    pub mean_group_count: f64,
    pub trace: MetricsTrace,
}

/// Train once per radius with everything else (seed included) held fixed.
/// Runs are independent and execute in parallel.
pub fn sweep_tau(base: &ExperimentConfig, taus: &[f64]) -> Result<Vec<SweepPoint>> {
    if taus.is_empty() {
        return Err(Error::EmptyInput("sweep needs at least one radius"));
    }
    if !matches!(base.stop, StopRule::RadiusThreshold(_)) {
        return Err(Error::Config("a radius sweep needs a RadiusThreshold stop rule".into()));
    }
    taus.par_iter()
        .map(|&tau| {
            let mut cfg = base.clone();
            cfg.stop = StopRule::RadiusThreshold(tau);
            let trace = train(&cfg)?;
            let last = trace.last().ok_or(Error::EmptyInput("run produced no records"))?;
            Ok(SweepPoint {
                tau,
                target_accuracy: last.target_accuracy,
                mean_group_count: trace.mean_group_count(),
                trace: trace.clone(),
            })
        })
        .collect()
}
