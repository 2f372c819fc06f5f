//! Domain types shared by every stage of the pipeline, plus the few numeric
//! helpers everything else leans on.
//!
//! Randomness comes from a single pinned generator, xoshiro256++ seeded
//! through SplitMix64 (`Xoshiro256PlusPlus::seed_from_u64`). Uniform `f64`
//! draws take the top 53 bits of each output word, so a seed fully determines
//! every experiment on every platform.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The generator used for every random draw in the crate.
pub type Rng = Xoshiro256PlusPlus;

/// Build the crate generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// SplitMix64 finalizer, used to derive independent substream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of substream `stream` under `seed`. Distinct (seed, stream) pairs map
/// to unrelated generators, so per-image streams can be built independently.
pub fn substream_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm. Accumulates in scaled form so very large or tiny entries
/// neither overflow nor lose precision.
pub fn l2_norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let sum: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * sum.sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Which domain a sample was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainId {
    Source(usize),
    Target,
}

impl DomainId {
    /// Label used by the domain discriminators: 0 for any source, 1 for the target.
    pub fn label(self) -> u8 {
        match self {
            DomainId::Source(_) => 0,
            DomainId::Target => 1,
        }
    }

    pub fn is_source(self) -> bool {
        matches!(self, DomainId::Source(_))
    }

    pub fn validate(self, n_sources: usize) -> Result<()> {
        match self {
            DomainId::Source(index) if index >= n_sources => {
                Err(Error::SourceOutOfRange { index, n_sources })
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for DomainId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainId::Source(k) => write!(f, "source{k}"),
            DomainId::Target => f.write_str("target"),
        }
    }
}

/// Axis-aligned rectangle with `x1 < x2` and `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x1 < self.x2 && self.y1 < self.y2 {
            Ok(())
        } else {
            Err(Error::InvalidBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            })
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// One region proposal: a feature vector plus whatever side information the
/// grouping strategies may use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<usize>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    pub domain: DomainId,
}

impl Proposal {
    pub fn new(feature: Vec<f64>, domain: DomainId) -> Self {
        Proposal {
            feature,
            pseudo_label: None,
            bbox: None,
            domain,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.pseudo_label = Some(label);
        self
    }

    pub fn with_box(mut self, bbox: BoundingBox) -> Self {
        self.bbox = Some(bbox);
        self
    }

    pub fn dim(&self) -> usize {
        self.feature.len()
    }

    /// Check the proposal against the run's feature dimension and class count.
    pub fn validate(&self, dim: usize, n_classes: usize) -> Result<()> {
        check_dim(dim, self.feature.len())?;
        if let Some(b) = &self.bbox {
            b.validate()?;
        }
        match self.pseudo_label {
            Some(label) if label >= n_classes => Err(Error::LabelOutOfRange {
                label,
                classes: n_classes,
            }),
            _ => Ok(()),
        }
    }
}

/// One synthetic image: a global feature and its ordered proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub image_feature: Vec<f64>,
    pub proposals: Vec<Proposal>,
    pub domain: DomainId,
    /// Ground-truth classes per proposal. Simulation only; alignment losses
    /// never read these for the target domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_labels: Option<Vec<usize>>,
}

impl ImageSample {
    pub fn validate(&self, dim: usize, n_classes: usize) -> Result<()> {
        check_dim(dim, self.image_feature.len())?;
        for p in &self.proposals {
            p.validate(dim, n_classes)?;
            if p.domain != self.domain {
                return Err(Error::Config(format!(
                    "proposal tagged {} inside a {} image",
                    p.domain, self.domain
                )));
            }
        }
        if let Some(labels) = &self.true_labels {
            if labels.len() != self.proposals.len() {
                return Err(Error::Config(format!(
                    "{} true labels for {} proposals",
                    labels.len(),
                    self.proposals.len()
                )));
            }
            if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: n_classes,
                });
            }
        }
        Ok(())
    }
}
