//! Similarity-based group alignment for unsupervised domain adaptation.
//!
//! Proposals from a labelled source domain and an unlabelled target domain
//! are grouped by visual similarity (complete-linkage agglomeration over
//! cosine distance), pooled into group embeddings, and aligned across domains
//! with either a gradient-reversed domain discriminator or a max-margin
//! contrastive loss. Everything runs on synthetic Gaussian feature domains so
//! the effect of each design choice can be measured at desk scale.
//!
//! Module map:
//!
//! * [`common`]: proposals, images, domain ids, the pinned RNG.
//! * [`clustering`]: distance metrics, agglomeration, group pooling.
//! * [`nn`]: dense networks, BCE, gradient reversal, momentum SGD.
//! * [`losses`]: adversarial and contrastive alignment losses.
//! * [`simulate`]: synthetic domains and the proxy classification task.
//! * [`topology`]: shared / per-source discriminator wiring.
//! * [`runner`]: experiment config, training loop, sweeps and reports.

pub mod clustering;
pub mod common;
pub mod error;
pub mod losses;
pub mod nn;
pub mod runner;
pub mod simulate;
pub mod topology;

pub use clustering::{
    agglomerate, cluster_by_mode, cosine_distance, group_embeddings, iou_distance, ClusterAssignment,
    DistanceMetric, GroupEmbedding, GroupingMode, StopRule,
};
pub use common::{l2_norm, seeded_rng, BoundingBox, DomainId, ImageSample, Proposal};
pub use error::{Error, Result};
pub use losses::{adversarial_loss, composite_loss, contrastive_class_matched, contrastive_nn_matched, ContrastiveSpec};
pub use nn::{bce_loss, grl, DenseNet, GrlSpec, SgdConfig};
pub use runner::{sweep_tau, train, ExperimentConfig, MetricsTrace};
pub use simulate::{generate, DomainSpec, Scenario, SyntheticDataset};
pub use topology::{route, DiscriminatorBank, Topology, TopologySpec};
