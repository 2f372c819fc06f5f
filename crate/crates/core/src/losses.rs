//! Alignment losses with exact gradients in the input embeddings.
//!
//! * [`adversarial_loss`]: mean binary cross-entropy of a domain
//!   discriminator, with feature gradients passed through gradient reversal.
//! * [`contrastive_class_matched`]: max-margin contrastive loss between one
//!   embedding per class in each domain.
//! * [`contrastive_nn_matched`]: the class-free variant where each source
//!   embedding is matched to its nearest target embedding.
//! * [`composite_loss`]: `L_det + lambda1 * L_img + lambda2 * L_inst`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::GroupEmbedding;
use crate::common::{check_dim, squared_distance};
use crate::error::{Error, Result};
use crate::nn::{bce_loss, grl, DenseNet, GrlSpec};

/// Group embeddings presented to the alignment losses for one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentBatch {
    /// One list per source domain.
    pub source_groups: Vec<Vec<GroupEmbedding>>,
    pub target_groups: Vec<GroupEmbedding>,
    pub source_image_feats: Vec<Vec<f64>>,
    pub target_image_feats: Vec<Vec<f64>>,
}

impl AlignmentBatch {
    /// All embedding and image vectors must share one dimension.
    pub fn validate(&self) -> Result<()> {
        let mut dim = None;
        let vectors = self
            .source_groups
            .iter()
            .flatten()
            .chain(&self.target_groups)
            .map(|g| g.vector.len())
            .chain(self.source_image_feats.iter().chain(&self.target_image_feats).map(Vec::len));
        for len in vectors {
            match dim {
                None => dim = Some(len),
                Some(d) => check_dim(d, len)?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    ClassMatched,
    NearestNeighbor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveSpec {
    pub margin: f64,
    pub mode: ContrastiveMode,
}

impl ContrastiveSpec {
    pub fn new(margin: f64, mode: ContrastiveMode) -> Result<Self> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::Config(format!("contrastive margin must be positive, got {margin}")));
        }
        Ok(ContrastiveSpec { margin, mode })
    }

    fn expect_mode(&self, mode: ContrastiveMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Config(format!(
                "contrastive spec is {:?}, loss needs {:?}",
                self.mode, mode
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialOutput {
    pub loss: f64,
    /// Gradient reaching each input embedding, already reversed and scaled
    /// by the GRL.
    pub embedding_grads: Vec<Vec<f64>>,
    /// Discriminator probability for each input.
    pub probabilities: Vec<f64>,
}

/// Mean BCE of `disc` labelling every input as `domain_label`.
///
/// Discriminator parameter gradients of the mean loss accumulate into `disc`
/// (descending the loss); the returned embedding gradients are
/// `-lambda * dL/dx`. An empty input yields a zero loss.
pub fn adversarial_loss<V: AsRef<[f64]>>(
    inputs: &[V],
    domain_label: u8,
    disc: &mut DenseNet,
    grl_spec: GrlSpec,
) -> Result<AdversarialOutput> {
    adversarial_loss_weighted(inputs, domain_label, disc, grl_spec, 1.0)
}

/// [`adversarial_loss`] with the discriminator's parameter gradients scaled
/// by `disc_weight`. Embedding gradients are unaffected.
pub fn adversarial_loss_weighted<V: AsRef<[f64]>>(
    inputs: &[V],
    domain_label: u8,
    disc: &mut DenseNet,
    grl_spec: GrlSpec,
    disc_weight: f64,
) -> Result<AdversarialOutput> {
    if domain_label > 1 {
        return Err(Error::Config(format!("domain label must be 0 or 1, got {domain_label}")));
    }
    if disc.output_dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: disc.output_dim(),
        });
    }
    if inputs.is_empty() {
        log::debug!("adversarial loss on an empty group list");
        return Ok(AdversarialOutput {
            loss: 0.0,
            embedding_grads: Vec::new(),
            probabilities: Vec::new(),
        });
    }
    let scale = 1.0 / inputs.len() as f64;
    let mut loss = 0.0;
    let mut embedding_grads = Vec::with_capacity(inputs.len());
    let mut probabilities = Vec::with_capacity(inputs.len());
    for x in inputs {
        let x = grl_spec.forward(x.as_ref());
        let (out, tape) = disc.forward(x)?;
        let (l, dl_dp) = bce_loss(out[0], domain_label);
        loss += scale * l;
        probabilities.push(out[0]);
        let dx = disc.backward_scaled(&tape, &[scale * dl_dp], disc_weight)?;
        embedding_grads.push(grl(&dx, grl_spec));
    }
    Ok(AdversarialOutput {
        loss,
        embedding_grads,
        probabilities,
    })
}

/// Per-class embeddings keyed by class index.
pub type ClassEmbeddings = BTreeMap<usize, Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassContrastiveOutput {
    pub loss: f64,
    pub source_grads: ClassEmbeddings,
    pub target_grads: ClassEmbeddings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NnContrastiveOutput {
    pub loss: f64,
    pub source_grads: Vec<Vec<f64>>,
    pub target_grads: Vec<Vec<f64>>,
    /// Index of the matched target embedding for each source embedding.
    pub nearest: Vec<usize>,
}

fn add_scaled(acc: &mut [f64], diff: &[f64], scale: f64) {
    for (a, d) in acc.iter_mut().zip(diff) {
        *a += scale * d;
    }
}

/// Adds one anchor/candidate term to the loss and gradients. Positive pairs
/// contribute `|a - b|^2`, negatives `max(0, m - |a - b|^2)`.
fn pair_term(a: &[f64], b: &[f64], positive: bool, margin: f64, ga: &mut [f64], gb: &mut [f64]) -> f64 {
    let d2 = squared_distance(a, b);
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if positive {
        add_scaled(ga, &diff, 2.0);
        add_scaled(gb, &diff, -2.0);
        d2
    } else if margin - d2 > 0.0 {
        add_scaled(ga, &diff, -2.0);
        add_scaled(gb, &diff, 2.0);
        margin - d2
    } else {
        0.0
    }
}

/// Max-margin contrastive loss between per-class source and target embeddings:
/// `sum_i |F0_i - F1_i|^2 + sum_{j != i} max(0, m - |F0_i - F1_j|^2)`.
///
/// Only classes present in both domains take part.
pub fn contrastive_class_matched(
    source: &ClassEmbeddings,
    target: &ClassEmbeddings,
    spec: ContrastiveSpec,
) -> Result<ClassContrastiveOutput> {
    spec.expect_mode(ContrastiveMode::ClassMatched)?;
    let shared: Vec<usize> = source.keys().filter(|c| target.contains_key(c)).copied().collect();
    let skipped = source.len() + target.len() - 2 * shared.len();
    if skipped > 0 {
        log::debug!("contrastive loss skipped {skipped} classes seen in one domain only");
    }
    let dim = source.values().chain(target.values()).next().map_or(0, Vec::len);
    for v in source.values().chain(target.values()) {
        check_dim(dim, v.len())?;
    }
    let mut source_grads: ClassEmbeddings = shared.iter().map(|&c| (c, vec![0.0; dim])).collect();
    let mut target_grads: ClassEmbeddings = shared.iter().map(|&c| (c, vec![0.0; dim])).collect();
    let mut loss = 0.0;
    for &i in &shared {
        let a = &source[&i];
        for &j in &shared {
            let mut ga = std::mem::take(source_grads.get_mut(&i).expect("shared"));
            let gb = target_grads.get_mut(&j).expect("shared");
            loss += pair_term(a, &target[&j], i == j, spec.margin, &mut ga, gb);
            source_grads.insert(i, ga);
        }
    }
    Ok(ClassContrastiveOutput {
        loss,
        source_grads,
        target_grads,
    })
}

/// Index of the target embedding closest to `anchor`; ties go to the lowest index.
pub fn nearest_index<V: AsRef<[f64]>>(anchor: &[f64], candidates: &[V]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (j, c) in candidates.iter().enumerate() {
        let d = squared_distance(anchor, c.as_ref());
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| j)
}

/// Nearest-neighbour matched contrastive loss. Each source embedding `i` is
/// pulled to its nearest target `nn(i)` and pushed at least `m` (squared
/// distance) away from every other target embedding. The matching is held
/// fixed when differentiating.
pub fn contrastive_nn_matched<V: AsRef<[f64]>>(
    source: &[V],
    target: &[V],
    spec: ContrastiveSpec,
) -> Result<NnContrastiveOutput> {
    spec.expect_mode(ContrastiveMode::NearestNeighbor)?;
    let dim = source.iter().chain(target).next().map_or(0, |v| v.as_ref().len());
    for v in source.iter().chain(target) {
        check_dim(dim, v.as_ref().len())?;
    }
    let mut source_grads = vec![vec![0.0; dim]; source.len()];
    let mut target_grads = vec![vec![0.0; dim]; target.len()];
    if source.is_empty() || target.is_empty() {
        log::debug!("nearest-neighbour contrastive loss on an empty side");
        return Ok(NnContrastiveOutput {
            loss: 0.0,
            source_grads,
            target_grads,
            nearest: Vec::new(),
        });
    }
    let mut loss = 0.0;
    let mut nearest = Vec::with_capacity(source.len());
    for (i, a) in source.iter().enumerate() {
        let a = a.as_ref();
        let nn = nearest_index(a, target).expect("target is nonempty");
        nearest.push(nn);
        for (j, b) in target.iter().enumerate() {
            loss += pair_term(a, b.as_ref(), j == nn, spec.margin, &mut source_grads[i], &mut target_grads[j]);
        }
    }
    Ok(NnContrastiveOutput {
        loss,
        source_grads,
        target_grads,
        nearest,
    })
}

/// `det + lambda1 * img + lambda2 * inst`.
pub fn composite_loss(det_proxy_loss: f64, img_loss: f64, inst_loss: f64, lambda1: f64, lambda2: f64) -> f64 {
    debug_assert!(lambda1 >= 0.0 && lambda2 >= 0.0);
    det_proxy_loss + lambda1 * img_loss + lambda2 * inst_loss
}
