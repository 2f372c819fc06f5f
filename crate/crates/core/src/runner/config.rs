use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{DistanceMetric, GroupingMode, StopRule};
use crate::error::{Error, Result};
use crate::nn::SgdConfig;
use crate::simulate::{DomainSpec, Scenario};
use crate::topology::{Topology, TopologySpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Adversarial,
    Contrastive,
}

/// What the instance-level loss aligns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceMode {
    /// Every proposal on its own, no grouping.
    Proposals,
    Sg,
    Mg,
    MgCa,
}

impl InstanceMode {
    pub fn grouping(self) -> Option<GroupingMode> {
        match self {
            InstanceMode::Proposals => None,
            InstanceMode::Sg => Some(GroupingMode::SingleGroup),
            InstanceMode::Mg => Some(GroupingMode::MultiGroup),
            InstanceMode::MgCa => Some(GroupingMode::ClassAgnostic),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub steps: usize,
    pub lr: f64,
}

/// Network shapes. The encoder maps raw proposal features to the aligned
/// feature space; classifier and discriminators read that space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 32,
            encoder_hidden: Vec::new(),
            classifier_hidden: Vec::new(),
            disc_hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Images pre-generated per domain for training.
    pub train_images: usize,
    /// Held-out images per domain for evaluation.
    pub eval_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_images: 400,
            eval_images: 100,
        }
    }
}

/// Every knob of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub alignment: Alignment,
    pub mode: InstanceMode,
    pub metric: DistanceMetric,
    pub stop: StopRule,
    pub image_level: bool,
    /// Weight of the image-level alignment loss.
    pub lambda_img: f64,
    /// Weight of the instance-level alignment loss.
    pub lambda_inst: f64,
    pub margin: f64,
    /// Also match target embeddings to their nearest source embedding.
    pub symmetric_contrastive: bool,
    pub grl_lambda: f64,
    pub schedule: Vec<Phase>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Discriminator learning rate as a multiple of the current rate.
    pub disc_lr_mult: f64,
    pub topology: Topology,
    pub sources: Vec<DomainSpec>,
    pub target: DomainSpec,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub seed: u64,
    /// Optional cap on the total number of steps.
    pub max_steps: Option<usize>,
    pub eval_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scenario = Scenario::default();
        ExperimentConfig {
            alignment: Alignment::Adversarial,
            mode: InstanceMode::MgCa,
            metric: DistanceMetric::Cosine,
            stop: StopRule::RadiusThreshold(0.5),
            image_level: true,
            lambda_img: 1.0,
            lambda_inst: 1.0,
            margin: 1.0,
            symmetric_contrastive: false,
            grl_lambda: 1.0,
            schedule: vec![Phase { steps: 2000, lr: 1e-3 }, Phase { steps: 500, lr: 1e-4 }],
            momentum: 0.9,
            weight_decay: 5e-4,
            disc_lr_mult: 1.0,
            topology: Topology::Shared,
            sources: scenario.sources(),
            target: scenario.target(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            max_steps: None,
            eval_every: 100,
        }
    }
}

impl ExperimentConfig {
    /// Replace the source and target domains with those of `scenario`.
    pub fn with_scenario(mut self, scenario: &Scenario) -> Self {
        self.sources = scenario.sources();
        self.target = scenario.target();
        self
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn topology_spec(&self) -> TopologySpec {
        self.topology.spec(self.n_sources())
    }

    pub fn input_dim(&self) -> usize {
        self.target.dim()
    }

    pub fn n_classes(&self) -> usize {
        self.target.n_classes()
    }

    pub fn total_steps(&self) -> usize {
        let planned: usize = self.schedule.iter().map(|p| p.steps).sum();
        self.max_steps.map_or(planned, |cap| cap.min(planned))
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let mut end = 0;
        for phase in &self.schedule {
            end += phase.steps;
            if step < end {
                return phase.lr;
            }
        }
        self.schedule.last().map_or(0.0, |p| p.lr)
    }

    pub fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.sources.is_empty() {
            return bad("at least one source domain is required".into());
        }
        self.topology_spec().validate()?;
        self.target.validate()?;
        for (k, s) in self.sources.iter().enumerate() {
            s.validate()?;
            if s.dim() != self.target.dim() || s.n_classes() != self.target.n_classes() {
                return bad(format!("source {k} disagrees with the target on dimension or class count"));
            }
        }
        self.stop.validate()?;
        for (name, v) in [
            ("lambda_img", self.lambda_img),
            ("lambda_inst", self.lambda_inst),
            ("grl_lambda", self.grl_lambda),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("disc_lr_mult", self.disc_lr_mult),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if self.schedule.is_empty() || self.schedule.iter().any(|p| p.steps == 0 || !(p.lr > 0.0)) {
            return bad("schedule needs phases with positive steps and learning rates".into());
        }
        if self.total_steps() == 0 {
            return bad("run has zero steps".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if self.model.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if self.data.train_images == 0 || self.data.eval_images == 0 {
            return bad("train_images and eval_images must be >= 1".into());
        }
        if self.metric == DistanceMetric::SpatialIou && self.mode != InstanceMode::Proposals {
            let boxless = self.sources.iter().chain([&self.target]).any(|s| !s.with_boxes);
            if boxless {
                return bad("the IoU metric needs proposal boxes, but a domain generates none".into());
            }
        }
        Ok(())
    }

    /// Load from a `.json` or `.toml` file.
    ///
    /// Besides the config fields, a file may name a scenario `preset` or
    /// give a full `scenario` table; either one supplies the domains, so it
    /// cannot be combined with explicit `sources` or `target`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => serde_json::from_str(&text)?,
        };
        Self::from_value(value)
    }

    /// Build from an already parsed document; see [`ExperimentConfig::from_file`].
    pub fn from_value(mut value: serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a table of fields".into()))?;
        let preset = obj.remove("preset");
        let scenario = obj.remove("scenario");
        let explicit_domains = obj.contains_key("sources") || obj.contains_key("target");
        let scenario = match (preset, scenario) {
            (None, None) => None,
            (Some(_), Some(_)) => return Err(Error::Config("give either `preset` or `scenario`, not both".into())),
            (Some(p), None) => {
                let name = p.as_str().ok_or_else(|| Error::Config("`preset` must be a string".into()))?;
                Some(Scenario::preset(name)?)
            }
            (None, Some(s)) => Some(serde_json::from_value::<Scenario>(s)?),
        };
        let config: ExperimentConfig = serde_json::from_value(value)?;
        match scenario {
            Some(_) if explicit_domains => Err(Error::Config(
                "`sources`/`target` cannot be combined with `preset` or `scenario`".into(),
            )),
            Some(sc) => Ok(config.with_scenario(&sc)),
            None => Ok(config),
        }
    }
}
