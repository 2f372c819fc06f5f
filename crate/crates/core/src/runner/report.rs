//! On-disk outputs: `metrics.csv` (one row per evaluation record) and
//! `summary.json` (final metrics, config echo, seed).
//!
//! CSV columns, in order:
//!
//! ```text
//! step, lr, loss_det, loss_img, loss_inst, loss_total,
//! target_accuracy, source_accuracy,
//! n_groups_source<k>..., n_groups_target,
//! n_groups_smoothed_source<k>..., n_groups_smoothed_target,
//! disc_acc_image_<j>..., disc_acc_instance_<j>...,
//! centroid_gap_c<c>...
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so parsing a row gives
//! back the exact value. A missing centroid gap is an empty cell.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::sweep::SweepPoint;
use super::train::{EvalRecord, MetricsTrace};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA: &str = include_str!("../../schema/summary.schema.json");

fn domain_names(n_sources: usize) -> Vec<String> {
    (0..n_sources)
        .map(|k| format!("source{k}"))
        .chain(["target".to_string()])
        .collect()
}

fn header(trace: &MetricsTrace, first: &EvalRecord) -> Vec<String> {
    let mut h: Vec<String> = [
        "step",
        "lr",
        "loss_det",
        "loss_img",
        "loss_inst",
        "loss_total",
        "target_accuracy",
        "source_accuracy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let domains = domain_names(trace.n_sources);
    h.extend(domains.iter().map(|d| format!("n_groups_{d}")));
    h.extend(domains.iter().map(|d| format!("n_groups_smoothed_{d}")));
    h.extend((0..first.disc_acc_image.len()).map(|j| format!("disc_acc_image_{j}")));
    h.extend((0..first.disc_acc_instance.len()).map(|j| format!("disc_acc_instance_{j}")));
    h.extend((0..trace.n_classes).map(|c| format!("centroid_gap_c{c}")));
    h
}

fn row(r: &EvalRecord) -> Vec<String> {
    let f = |v: f64| format!("{v:?}");
    let mut out = vec![r.step.to_string(), f(r.lr)];
    out.extend(
        [
            r.loss_det,
            r.loss_img,
            r.loss_inst,
            r.loss_total,
            r.target_accuracy,
            r.source_accuracy,
        ]
        .map(f),
    );
    out.extend(r.n_groups.iter().map(usize::to_string));
    out.extend(r.n_groups_smoothed.iter().copied().map(f));
    out.extend(r.disc_acc_image.iter().copied().map(f));
    out.extend(r.disc_acc_instance.iter().copied().map(f));
    out.extend(r.centroid_gap.iter().map(|g| g.map(f).unwrap_or_default()));
    out
}

/// Write the trace as CSV.
pub fn write_csv<W: Write>(trace: &MetricsTrace, out: W) -> Result<()> {
    let first = trace.records.first().ok_or(Error::EmptyInput("trace has no records"))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(trace, first))?;
    for r in &trace.records {
        w.write_record(row(r))?;
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(cell: &str, column: &str) -> Result<T> {
    cell.parse()
        .map_err(|_| Error::Config(format!("bad value {cell:?} in column {column}")))
}

/// Parse CSV written by [`write_csv`]. Run-level means are not part of the
/// CSV and come back empty.
pub fn read_csv<R: Read>(input: R) -> Result<MetricsTrace> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let n_domains = header.iter().filter(|h| h.starts_with("n_groups_") && !h.starts_with("n_groups_smoothed_")).count();
    if n_domains == 0 {
        return Err(Error::Config("CSV has no group-count columns".into()));
    }
    let n_image = count("disc_acc_image_");
    let n_instance = count("disc_acc_instance_");
    let n_classes = count("centroid_gap_c");
    let mut records = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let cells: Vec<&str> = rec.iter().collect();
        if cells.len() != header.len() {
            return Err(Error::Config(format!("row has {} cells, header {}", cells.len(), header.len())));
        }
        let mut i = 0;
        let mut next = || {
            let c = (cells[i], header[i].as_str());
            i += 1;
            c
        };
        let mut float = || -> Result<f64> {
            let (c, h) = next();
            parse(c, h)
        };
        let step = {
            let v = float()?;
            v as usize
        };
        let lr = float()?;
        let loss_det = float()?;
        let loss_img = float()?;
        let loss_inst = float()?;
        let loss_total = float()?;
        let target_accuracy = float()?;
        let source_accuracy = float()?;
        let n_groups = (0..n_domains).map(|_| float().map(|v| v as usize)).collect::<Result<_>>()?;
        let n_groups_smoothed = (0..n_domains).map(|_| float()).collect::<Result<_>>()?;
        let disc_acc_image = (0..n_image).map(|_| float()).collect::<Result<_>>()?;
        let disc_acc_instance = (0..n_instance).map(|_| float()).collect::<Result<_>>()?;
        let centroid_gap = (0..n_classes)
            .map(|_| {
                let (c, h) = next();
                if c.is_empty() {
                    Ok(None)
                } else {
                    parse(c, h).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        records.push(EvalRecord {
            step,
            lr,
            loss_det,
            loss_img,
            loss_inst,
            loss_total,
            target_accuracy,
            source_accuracy,
            n_groups,
            n_groups_smoothed,
            disc_acc_image,
            disc_acc_instance,
            centroid_gap,
        });
    }
    Ok(MetricsTrace {
        n_sources: n_domains - 1,
        n_classes,
        records,
        mean_groups: Vec::new(),
        mean_proposals: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    pub steps: usize,
    pub final_metrics: EvalRecord,
    pub mean_group_count: f64,
    pub mean_proposal_count: f64,
    pub config: ExperimentConfig,
}

impl Summary {
    pub fn new(trace: &MetricsTrace, config: &ExperimentConfig) -> Result<Self> {
        let last = trace.last().ok_or(Error::EmptyInput("trace has no records"))?;
        Ok(Summary {
            schema_version: SCHEMA_VERSION,
            kind: "train".into(),
            seed: config.seed,
            steps: last.step,
            final_metrics: last.clone(),
            mean_group_count: trace.mean_group_count(),
            mean_proposal_count: trace.mean_proposal_count(),
            config: config.clone(),
        })
    }
}

/// Write `metrics.csv` and `summary.json` into `dir`, creating it if needed.
pub fn report(trace: &MetricsTrace, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    if trace.records.is_empty() {
        return Err(Error::EmptyInput("trace has no records"));
    }
    fs::create_dir_all(dir)?;
    write_csv(trace, fs::File::create(dir.join("metrics.csv"))?)?;
    let summary = Summary::new(trace, config)?;
    let mut f = fs::File::create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Write a τ sweep: `sweep.csv` with one row per radius, plus a full
/// `metrics.csv` / `summary.json` per radius under `tau_<value>/`.
pub fn report_sweep(points: &[SweepPoint], base: &ExperimentConfig, dir: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::EmptyInput("sweep has no points"));
    }
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(fs::File::create(dir.join("sweep.csv"))?);
    w.write_record(["tau", "target_accuracy", "mean_group_count", "mean_proposal_count"])?;
    for p in points {
        w.write_record([
            format!("{:?}", p.tau),
            format!("{:?}", p.target_accuracy),
            format!("{:?}", p.mean_group_count),
            format!("{:?}", p.trace.mean_proposal_count()),
        ])?;
        let mut cfg = base.clone();
        cfg.stop = crate::clustering::StopRule::RadiusThreshold(p.tau);
        report(&p.trace, &cfg, &dir.join(format!("tau_{}", p.tau)))?;
    }
    w.flush()?;
    Ok(())
}
