//! `visga` command-line front end: training runs, radius sweeps and dataset
//! generation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use visga::runner::{report, report_sweep, Alignment, ExperimentConfig, InstanceMode, Phase};
use visga::simulate::Scenario;
use visga::{generate, sweep_tau, train, DistanceMetric, DomainId, StopRule, Topology};

#[derive(Parser, Debug)]
#[command(name = "visga", version, about = "Grouped instance alignment for domain adaptation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one training experiment and write metrics.csv and summary.json.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (created if missing).
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train once per cluster radius and write sweep.csv plus one directory per radius.
    SweepTau {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated radii.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        taus: Vec<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Generate one domain of the configured scenario as dataset.jsonl.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        /// `target` or `source<k>`.
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlignmentArg {
    Adversarial,
    Contrastive,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Proposals,
    Sg,
    Mg,
    MgCa,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Cosine,
    Iou,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TopologyArg {
    Shared,
    SepImg,
    SepIns,
    Separated,
}

/// Config sources, applied in order: defaults, `--config`, `--preset` and
/// scenario flags, then individual overrides.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// JSON or TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Scenario preset supplying the domains.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(Scenario::PRESETS))]
    preset: Option<String>,
    /// Feature dimension of the generated proposals.
    #[arg(long, help_heading = "Scenario")]
    dim: Option<usize>,
    /// Object classes, not counting background.
    #[arg(long, help_heading = "Scenario")]
    objects: Option<usize>,
    #[arg(long, help_heading = "Scenario")]
    separation: Option<f64>,
    #[arg(long, help_heading = "Scenario")]
    sigma: Option<f64>,
    /// Target shift in units of sigma.
    #[arg(long, help_heading = "Scenario")]
    shift_sigmas: Option<f64>,
    #[arg(long, help_heading = "Scenario")]
    shift_alignment: Option<f64>,
    #[arg(long, help_heading = "Scenario")]
    label_noise: Option<f64>,
    #[arg(long, help_heading = "Scenario")]
    overlap_bias: Option<f64>,
    /// Proposal count range, `LO:HI`.
    #[arg(long, value_parser = parse_range, help_heading = "Scenario")]
    proposals: Option<(usize, usize)>,

    #[arg(long, value_enum)]
    alignment: Option<AlignmentArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Cluster radius; selects the radius stop rule.
    #[arg(long, conflicts_with = "groups")]
    tau: Option<f64>,
    /// Fixed number of groups per partition; selects the count stop rule.
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    image_level: Option<bool>,
    #[arg(long)]
    lambda_img: Option<f64>,
    #[arg(long)]
    lambda_inst: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    symmetric_contrastive: Option<bool>,
    #[arg(long)]
    grl_lambda: Option<f64>,
    /// Learning-rate phases, `STEPS:LR,...`.
    #[arg(long, value_parser = parse_phase, value_delimiter = ',', num_args = 1..)]
    schedule: Option<Vec<Phase>>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    disc_lr_mult: Option<f64>,
    #[arg(long, value_enum)]
    topology: Option<TopologyArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    eval_images: Option<usize>,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo = lo.trim().parse().map_err(|e| format!("bad LO: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("bad HI: {e}"))?;
    Ok((lo, hi))
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    let (steps, lr) = s.split_once(':').ok_or("expected STEPS:LR")?;
    Ok(Phase {
        steps: steps.trim().parse().map_err(|e| format!("bad step count: {e}"))?,
        lr: lr.trim().parse().map_err(|e| format!("bad learning rate: {e}"))?,
    })
}

impl RunArgs {
    fn scenario_touched(&self) -> bool {
        self.preset.is_some()
            || self.dim.is_some()
            || self.objects.is_some()
            || self.separation.is_some()
            || self.sigma.is_some()
            || self.shift_sigmas.is_some()
            || self.shift_alignment.is_some()
            || self.label_noise.is_some()
            || self.overlap_bias.is_some()
            || self.proposals.is_some()
    }

    fn scenario(&self) -> Result<Scenario> {
        let mut sc = match &self.preset {
            Some(name) => Scenario::preset(name)?,
            None => Scenario::default(),
        };
        if let Some(v) = self.objects {
            if v != sc.n_objects && sc.source_mixes.iter().any(|m| !m.is_empty()) {
                bail!("--objects cannot resize a preset with explicit source class mixes");
            }
            sc.n_objects = v;
        }
        sc.dim = self.dim.unwrap_or(sc.dim);
        sc.separation = self.separation.unwrap_or(sc.separation);
        sc.sigma = self.sigma.unwrap_or(sc.sigma);
        sc.shift_sigmas = self.shift_sigmas.unwrap_or(sc.shift_sigmas);
        sc.shift_alignment = self.shift_alignment.unwrap_or(sc.shift_alignment);
        sc.label_noise = self.label_noise.unwrap_or(sc.label_noise);
        sc.overlap_bias = self.overlap_bias.unwrap_or(sc.overlap_bias);
        sc.proposals_per_image = self.proposals.unwrap_or(sc.proposals_per_image);
        if sc.dim == 0 {
            bail!("--dim must be at least 1");
        }
        Ok(sc)
    }

    fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if self.scenario_touched() {
            cfg = cfg.with_scenario(&self.scenario()?);
        }
        if let Some(a) = self.alignment {
            cfg.alignment = match a {
                AlignmentArg::Adversarial => Alignment::Adversarial,
                AlignmentArg::Contrastive => Alignment::Contrastive,
            };
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Proposals => InstanceMode::Proposals,
                ModeArg::Sg => InstanceMode::Sg,
                ModeArg::Mg => InstanceMode::Mg,
                ModeArg::MgCa => InstanceMode::MgCa,
            };
        }
        if let Some(m) = self.metric {
            cfg.metric = match m {
                MetricArg::Cosine => DistanceMetric::Cosine,
                MetricArg::Iou => DistanceMetric::SpatialIou,
            };
        }
        if let Some(t) = self.tau {
            cfg.stop = StopRule::RadiusThreshold(t);
        }
        if let Some(k) = self.groups {
            cfg.stop = StopRule::FixedCount(k);
        }
        if let Some(t) = self.topology {
            cfg.topology = match t {
                TopologyArg::Shared => Topology::Shared,
                TopologyArg::SepImg => Topology::SepImg,
                TopologyArg::SepIns => Topology::SepIns,
                TopologyArg::Separated => Topology::Separated,
            };
        }
        if let Some(s) = &self.schedule {
            cfg.schedule = s.clone();
        }
        cfg.image_level = self.image_level.unwrap_or(cfg.image_level);
        cfg.lambda_img = self.lambda_img.unwrap_or(cfg.lambda_img);
        cfg.lambda_inst = self.lambda_inst.unwrap_or(cfg.lambda_inst);
        cfg.margin = self.margin.unwrap_or(cfg.margin);
        cfg.symmetric_contrastive = self.symmetric_contrastive.unwrap_or(cfg.symmetric_contrastive);
        cfg.grl_lambda = self.grl_lambda.unwrap_or(cfg.grl_lambda);
        cfg.momentum = self.momentum.unwrap_or(cfg.momentum);
        cfg.weight_decay = self.weight_decay.unwrap_or(cfg.weight_decay);
        cfg.disc_lr_mult = self.disc_lr_mult.unwrap_or(cfg.disc_lr_mult);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.max_steps = self.max_steps.or(cfg.max_steps);
        cfg.eval_every = self.eval_every.unwrap_or(cfg.eval_every);
        cfg.model.feature_dim = self.feature_dim.unwrap_or(cfg.model.feature_dim);
        cfg.data.train_images = self.train_images.unwrap_or(cfg.data.train_images);
        cfg.data.eval_images = self.eval_images.unwrap_or(cfg.data.eval_images);
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}

fn parse_domain(name: &str, n_sources: usize) -> Result<DomainId> {
    let domain = match name {
        "target" => DomainId::Target,
        other => match other.strip_prefix("source").map(str::parse::<usize>) {
            Some(Ok(k)) => DomainId::Source(k),
            _ => bail!("unknown domain {other:?}; expected `target` or `source<k>`"),
        },
    };
    domain.validate(n_sources)?;
    Ok(domain)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, out } => {
            let cfg = run.build()?;
            ensure_dir(&out)?;
            info!("training for {} steps, seed {}", cfg.total_steps(), cfg.seed);
            let trace = train(&cfg)?;
            report(&trace, &cfg, &out)?;
            if let Some(last) = trace.last() {
                println!(
                    "step {}  target accuracy {:.4}  source accuracy {:.4}  mean groups {:.2}",
                    last.step,
                    last.target_accuracy,
                    last.source_accuracy,
                    trace.mean_group_count()
                );
            }
        }
        Command::SweepTau { run, taus, out } => {
            let cfg = run.build()?;
            ensure_dir(&out)?;
            info!("sweeping {} radii", taus.len());
            let points = sweep_tau(&cfg, &taus)?;
            report_sweep(&points, &cfg, &out)?;
            for p in &points {
                println!(
                    "tau {:<8} target accuracy {:.4}  mean groups {:.2}",
                    p.tau, p.target_accuracy, p.mean_group_count
                );
            }
        }
        Command::GenData { run, domain, images, out } => {
            let cfg = run.build()?;
            let domain = parse_domain(&domain, cfg.n_sources())?;
            let spec = match domain {
                DomainId::Source(k) => &cfg.sources[k],
                DomainId::Target => &cfg.target,
            };
            ensure_dir(&out)?;
            let data = generate(spec, domain, images, cfg.seed)?;
            let path = out.join("dataset.jsonl");
            let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            let mut writer = std::io::BufWriter::new(file);
            data.write_jsonl(&mut writer)?;
            std::io::Write::flush(&mut writer)?;
            println!("wrote {} images ({} proposals) to {}", images, data.proposal_count(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
