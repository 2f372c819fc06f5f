//! Discriminator wiring for one or several source domains.
//!
//! With shared discriminators every source presents its features to the same
//! network. With per-source discriminators, source `k` only ever talks to
//! discriminator `k`, and the target is shown to every discriminator at that
//! level, one source–target pair each.

use serde::{Deserialize, Serialize};

use crate::common::{DomainId, Rng};
use crate::error::{Error, Result};
use crate::nn::DenseNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    Shared,
    PerSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Image,
    Instance,
}

/// The four named wirings exposed on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Shared at both levels.
    Shared,
    /// Separate image-level discriminators, shared instance-level.
    SepImg,
    /// Shared image-level, separate instance-level discriminators.
    SepIns,
    /// Separate at both levels.
    Separated,
}

impl Topology {
    pub const ALL: [Topology; 4] = [Topology::Shared, Topology::SepImg, Topology::SepIns, Topology::Separated];

    pub fn spec(self, n_sources: usize) -> TopologySpec {
        let (image_disc, instance_disc) = match self {
            Topology::Shared => (Sharing::Shared, Sharing::Shared),
            Topology::SepImg => (Sharing::PerSource, Sharing::Shared),
            Topology::SepIns => (Sharing::Shared, Sharing::PerSource),
            Topology::Separated => (Sharing::PerSource, Sharing::PerSource),
        };
        TopologySpec {
            n_sources,
            image_disc,
            instance_disc,
        }
    }
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Topology::Shared),
            "sep_img" | "sep-img" => Ok(Topology::SepImg),
            "sep_ins" | "sep-ins" => Ok(Topology::SepIns),
            "separated" => Ok(Topology::Separated),
            other => Err(Error::Config(format!("unknown topology {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub n_sources: usize,
    pub image_disc: Sharing,
    pub instance_disc: Sharing,
}

impl TopologySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 {
            return Err(Error::Config("at least one source domain is required".into()));
        }
        Ok(())
    }

    pub fn sharing(&self, level: Level) -> Sharing {
        match level {
            Level::Image => self.image_disc,
            Level::Instance => self.instance_disc,
        }
    }

    /// Number of discriminators at `level`.
    pub fn count(&self, level: Level) -> usize {
        match self.sharing(level) {
            Sharing::Shared => 1,
            Sharing::PerSource => self.n_sources,
        }
    }
}

/// Indices of the discriminators at `level` that see `domain`.
pub fn route(spec: &TopologySpec, domain: DomainId, level: Level) -> Result<Vec<usize>> {
    spec.validate()?;
    domain.validate(spec.n_sources)?;
    Ok(match (spec.sharing(level), domain) {
        (Sharing::Shared, _) => vec![0],
        (Sharing::PerSource, DomainId::Source(k)) => vec![k],
        (Sharing::PerSource, DomainId::Target) => (0..spec.n_sources).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorBank {
    pub image_discs: Vec<DenseNet>,
    pub instance_discs: Vec<DenseNet>,
}

impl DiscriminatorBank {
    /// Fresh discriminators for `spec`; image-level networks are drawn first.
    pub fn new(spec: &TopologySpec, input_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut make = |n: usize| -> Result<Vec<DenseNet>> {
            (0..n).map(|_| DenseNet::discriminator(input_dim, hidden, rng)).collect()
        };
        let image_discs = make(spec.count(Level::Image))?;
        let instance_discs = make(spec.count(Level::Instance))?;
        Ok(DiscriminatorBank {
            image_discs,
            instance_discs,
        })
    }

    pub fn check(&self, spec: &TopologySpec) -> Result<()> {
        for (level, len) in [(Level::Image, self.image_discs.len()), (Level::Instance, self.instance_discs.len())] {
            if len != spec.count(level) {
                return Err(Error::Config(format!(
                    "{level:?} bank holds {len} discriminators, topology needs {}",
                    spec.count(level)
                )));
            }
        }
        Ok(())
    }

    pub fn level(&self, level: Level) -> &[DenseNet] {
        match level {
            Level::Image => &self.image_discs,
            Level::Instance => &self.instance_discs,
        }
    }

    pub fn level_mut(&mut self, level: Level) -> &mut [DenseNet] {
        match level {
            Level::Image => &mut self.image_discs,
            Level::Instance => &mut self.instance_discs,
        }
    }
}
