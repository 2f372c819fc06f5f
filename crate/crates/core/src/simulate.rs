//! Synthetic domains: class-conditional Gaussian proposal features with a
//! per-domain shift, noisy pseudo-labels and loosely class-clustered boxes.
//!
//! Each image is generated from its own substream
//! (`substream_seed(seed, image_index)`), so datasets can be produced in
//! parallel and any single image can be regenerated in isolation.

use std::io::{BufRead, Write};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::common::{check_dim, seeded_rng, substream_seed, BoundingBox, DomainId, ImageSample, Proposal, Rng};
use crate::error::{Error, Result};
use crate::nn::DenseNet;

/// Side length of the square canvas boxes are drawn on.
pub const CANVAS: f64 = 100.0;
/// Box side lengths are uniform in this range.
pub const BOX_SIDE: (f64, f64) = (8.0, 24.0);
/// Std-dev of box centres around their class anchor when biased to overlap.
pub const ANCHOR_JITTER: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub class_means: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation of every class.
    pub class_cov_scale: f64,
    pub shift: Vec<f64>,
    /// Inclusive range of proposal counts per image.
    pub proposals_per_image: (usize, usize),
    pub class_mix: Vec<f64>,
    /// Probability that a pseudo-label is redrawn uniformly over all classes.
    pub label_noise: f64,
    /// Probability that a proposal box is centred near its class anchor
    /// instead of uniformly on the canvas.
    #[serde(default = "default_overlap_bias")]
    pub overlap_bias: f64,
    /// Whether proposals carry boxes at all.
    #[serde(default = "default_true")]
    pub with_boxes: bool,
}

fn default_overlap_bias() -> f64 {
    0.8
}

fn default_true() -> bool {
    true
}

impl DomainSpec {
    pub fn n_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes();
        if c == 0 {
            return Err(Error::Config("a domain needs at least one class".into()));
        }
        let dim = self.dim();
        for mean in &self.class_means {
            check_dim(dim, mean.len())?;
        }
        check_dim(c, self.class_mix.len())?;
        if self.class_mix.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Config("class mix has a negative entry".into()));
        }
        let total: f64 = self.class_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class mix sums to {total}, expected 1")));
        }
        if !(self.class_cov_scale >= 0.0 && self.class_cov_scale.is_finite()) {
            return Err(Error::Config("class_cov_scale must be a finite value >= 0".into()));
        }
        let (lo, hi) = self.proposals_per_image;
        if hi < lo {
            return Err(Error::Config(format!("proposal range [{lo}, {hi}] is empty")));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!("label noise {} outside [0, 1)", self.label_noise)));
        }
        if !(0.0..=1.0).contains(&self.overlap_bias) {
            return Err(Error::Config(format!("overlap bias {} outside [0, 1]", self.overlap_bias)));
        }
        Ok(())
    }

    fn draw_class(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in self.class_mix.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        // Rounding left a sliver above the cumulative sum.
        self.class_mix.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    fn draw_box(&self, anchor: (f64, f64), rng: &mut Rng) -> BoundingBox {
        let (cx, cy) = if rng.random_bool(self.overlap_bias) {
            let jitter = Normal::new(0.0, ANCHOR_JITTER).expect("positive std");
            (anchor.0 + jitter.sample(rng), anchor.1 + jitter.sample(rng))
        } else {
            (rng.random_range(0.0..CANVAS), rng.random_range(0.0..CANVAS))
        };
        let w = rng.random_range(BOX_SIDE.0..BOX_SIDE.1);
        let h = rng.random_range(BOX_SIDE.0..BOX_SIDE.1);
        BoundingBox {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    /// One image drawn from its own generator.
    pub fn generate_image(&self, domain: DomainId, rng: &mut Rng) -> ImageSample {
        let c = self.n_classes();
        let dim = self.dim();
        let (lo, hi) = self.proposals_per_image;
        let count = rng.random_range(lo..=hi);
        let anchors: Vec<(f64, f64)> = (0..c)
            .map(|_| (rng.random_range(0.0..CANVAS), rng.random_range(0.0..CANVAS)))
            .collect();
        let mut proposals = Vec::with_capacity(count);
        let mut true_labels = Vec::with_capacity(count);
        for _ in 0..count {
            let class = self.draw_class(rng);
            let feature: Vec<f64> = (0..dim)
                .map(|d| {
                    let z: f64 = StandardNormal.sample(rng);
                    self.class_means[class][d] + self.shift[d] + self.class_cov_scale * z
                })
                .collect();
            let pseudo = if self.label_noise > 0.0 && rng.random_bool(self.label_noise) {
                rng.random_range(0..c)
            } else {
                class
            };
            let bbox = self.with_boxes.then(|| self.draw_box(anchors[class], rng));
            proposals.push(Proposal {
                feature,
                pseudo_label: Some(pseudo),
                bbox,
                domain,
            });
            true_labels.push(class);
        }
        let mut image_feature = vec![0.0; dim];
        if !proposals.is_empty() {
            for p in &proposals {
                for (acc, x) in image_feature.iter_mut().zip(&p.feature) {
                    *acc += x;
                }
            }
            let n = proposals.len() as f64;
            image_feature.iter_mut().for_each(|v| *v /= n);
        }
        ImageSample {
            image_feature,
            proposals,
            domain,
            true_labels: Some(true_labels),
        }
    }
}

/// Deterministic recipe for a family of related domains.
///
/// Label 0 is background and labels `1..=n_objects` are object classes;
/// class `k` is centred at `separation * e_k`. The target is translated by
/// `shift_sigmas * sigma` along [`Scenario::shift_direction`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub dim: usize,
    pub n_objects: usize,
    pub separation: f64,
    pub sigma: f64,
    pub shift_sigmas: f64,
    pub shift_alignment: f64,
    /// One class mix per source domain; an empty mix is uniform.
    pub source_mixes: Vec<Vec<f64>>,
    /// Class mix of the target domain; uniform when empty.
    pub target_mix: Vec<f64>,
    pub proposals_per_image: (usize, usize),
    /// Pseudo-label noise of the target domain. Sources are always clean.
    pub label_noise: f64,
    pub overlap_bias: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            dim: 16,
            n_objects: 1,
            separation: 3.0,
            sigma: 1.0,
            shift_sigmas: 3.0,
            shift_alignment: 0.9,
            source_mixes: vec![Vec::new()],
            target_mix: Vec::new(),
            proposals_per_image: (8, 32),
            label_noise: 0.0,
            overlap_bias: 0.8,
        }
    }
}

impl Scenario {
    pub const PRESETS: [&'static str; 3] = ["single-object", "multi-object", "multi-source"];

    /// Named setups: one object class, eight object classes with noisy target
    /// pseudo-labels, and two sources that each under-represent half of four
    /// object classes.
    pub fn preset(name: &str) -> Result<Scenario> {
        let base = Scenario::default();
        match name {
            "single-object" => Ok(base),
            "multi-object" => Ok(Scenario {
                n_objects: 8,
                label_noise: 0.2,
                ..base
            }),
            "multi-source" => {
                let n_objects = 4;
                let mix = |favoured: &[usize]| -> Vec<f64> {
                    let w: Vec<f64> = (0..=n_objects)
                        .map(|k| if k == 0 || favoured.contains(&k) { 1.0 } else { 0.1 })
                        .collect();
                    let total: f64 = w.iter().sum();
                    w.iter().map(|x| x / total).collect()
                };
                Ok(Scenario {
                    n_objects,
                    source_mixes: vec![mix(&[1, 2]), mix(&[3, 4])],
                    ..base
                })
            }
            other => Err(Error::Config(format!(
                "unknown scenario preset {other:?}; expected one of {}",
                Scenario::PRESETS.join(", ")
            ))),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_objects + 1
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        (0..self.n_classes())
            .map(|k| {
                let mut mean = vec![0.0; self.dim];
                mean[k % self.dim] = self.separation;
                mean
            })
            .collect()
    }

    /// Unit direction of the domain shift. Its aligned component points at
    /// the background mean, so objects drift toward background; the rest lies
    /// on the last axis, which carries no class information when
    /// `dim > n_classes`.
    pub fn shift_direction(&self) -> Vec<f64> {
        let mut u = vec![0.0; self.dim];
        let along = self.shift_alignment.clamp(0.0, 1.0);
        u[0] += along;
        u[self.dim - 1] += (1.0 - along * along).sqrt();
        let norm = crate::common::l2_norm(&u);
        u.iter_mut().for_each(|x| *x /= norm);
        u
    }

    /// Translation by `sigmas` standard deviations along the shift direction.
    pub fn shift(&self, sigmas: f64) -> Vec<f64> {
        self.shift_direction().iter().map(|u| u * sigmas * self.sigma).collect()
    }

    fn mix(&self, mix: &[f64]) -> Vec<f64> {
        if mix.is_empty() {
            vec![1.0 / self.n_classes() as f64; self.n_classes()]
        } else {
            mix.to_vec()
        }
    }

    /// A domain translated by `shift`.
    pub fn domain(&self, shift: Vec<f64>, mix: &[f64], label_noise: f64) -> DomainSpec {
        DomainSpec {
            class_means: self.class_means(),
            class_cov_scale: self.sigma,
            shift,
            proposals_per_image: self.proposals_per_image,
            class_mix: self.mix(mix),
            label_noise,
            overlap_bias: self.overlap_bias,
            with_boxes: true,
        }
    }

    /// Unshifted source domains with clean labels, one per entry of
    /// `source_mixes`.
    pub fn sources(&self) -> Vec<DomainSpec> {
        self.source_mixes
            .iter()
            .map(|mix| self.domain(vec![0.0; self.dim], mix, 0.0))
            .collect()
    }

    /// Target domain, shifted by `shift_sigmas`.
    pub fn target(&self) -> DomainSpec {
        self.domain(self.shift(self.shift_sigmas), &self.target_mix, self.label_noise)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub samples: Vec<ImageSample>,
    pub spec: DomainSpec,
    pub seed: u64,
}

/// Draw `n_images` images for `domain`.
pub fn generate(spec: &DomainSpec, domain: DomainId, n_images: usize, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::EmptyInput("n_images must be at least 1"));
    }
    let samples = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeded_rng(substream_seed(seed, i as u64));
            spec.generate_image(domain, &mut rng)
        })
        .collect();
    Ok(SyntheticDataset {
        samples,
        spec: spec.clone(),
        seed,
    })
}

impl SyntheticDataset {
    pub fn proposal_count(&self) -> usize {
        self.samples.iter().map(|s| s.proposals.len()).sum()
    }

    /// One JSON-encoded [`ImageSample`] per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for sample in &self.samples {
            serde_json::to_writer(&mut out, sample)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Parse the JSON-lines format written by [`SyntheticDataset::write_jsonl`].
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<ImageSample>> {
    let mut samples = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    Ok(samples)
}

/// Softmax cross-entropy of `logits` against `label`, with `dL/dlogits`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyOutput {
    /// Mean cross-entropy over all inputs.
    pub loss: f64,
    /// Gradient of the mean loss in each input vector.
    pub input_grads: Vec<Vec<f64>>,
}

/// Mean softmax cross-entropy of `classifier` over `(features, labels)`.
/// Classifier parameter gradients accumulate scaled by `param_scale`.
pub fn classification_loss(
    classifier: &mut DenseNet,
    features: &[&[f64]],
    labels: &[usize],
    param_scale: f64,
) -> Result<ProxyOutput> {
    check_dim(features.len(), labels.len())?;
    if features.is_empty() {
        return Ok(ProxyOutput {
            loss: 0.0,
            input_grads: Vec::new(),
        });
    }
    let scale = 1.0 / features.len() as f64;
    let mut loss = 0.0;
    let mut input_grads = Vec::with_capacity(features.len());
    for (x, &label) in features.iter().zip(labels) {
        let (logits, tape) = classifier.forward(x)?;
        let (l, mut g) = softmax_cross_entropy(&logits, label)?;
        loss += scale * l;
        g.iter_mut().for_each(|v| *v *= scale);
        input_grads.push(classifier.backward_scaled(&tape, &g, param_scale)?);
    }
    Ok(ProxyOutput { loss, input_grads })
}

/// Supervised stand-in for the detection loss: softmax cross-entropy of the
/// classifier on every source proposal against its true label.
pub fn proxy_task_loss(classifier: &mut DenseNet, samples: &[ImageSample]) -> Result<ProxyOutput> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        if !s.domain.is_source() {
            return Err(Error::Config("proxy task loss only applies to source samples".into()));
        }
        let truth = s
            .true_labels
            .as_ref()
            .ok_or_else(|| Error::Config("source sample without true labels".into()))?;
        for (p, &l) in s.proposals.iter().zip(truth) {
            features.push(p.feature.as_slice());
            labels.push(l);
        }
    }
    classification_loss(classifier, &features, &labels, 1.0)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of proposals whose predicted class (argmax of `predict`) equals
/// the hidden true label.
pub fn accuracy_with<F>(samples: &[ImageSample], mut predict: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples {
        let truth = s
            .true_labels
            .as_ref()
            .ok_or_else(|| Error::Config("sample without hidden true labels".into()))?;
        for (p, &l) in s.proposals.iter().zip(truth) {
            correct += usize::from(argmax(&predict(&p.feature)?) == l);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("accuracy over a dataset with no proposals"));
    }
    Ok(correct as f64 / total as f64)
}

/// Proxy-task accuracy of `classifier` on target proposals.
pub fn target_accuracy(classifier: &DenseNet, samples: &[ImageSample]) -> Result<f64> {
    accuracy_with(samples, |x| classifier.predict(x))
}
