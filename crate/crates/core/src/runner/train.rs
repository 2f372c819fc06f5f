use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{Alignment, ExperimentConfig, InstanceMode};
use crate::clustering::{cluster_by_mode, GroupEmbedding};
use crate::common::{l2_norm, seeded_rng, substream_seed, DomainId, ImageSample, Proposal};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss_weighted, composite_loss, contrastive_class_matched, contrastive_nn_matched, ClassEmbeddings,
    ContrastiveMode, ContrastiveSpec,
};
use crate::nn::{Activation, DenseNet, GrlSpec, Tape};
use crate::simulate::{accuracy_with, classification_loss, generate, SyntheticDataset};
use crate::topology::{route, DiscriminatorBank, Level, Sharing};

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const EVAL_STREAM: u64 = 0x6576_616c_0000;
const INIT_STREAM: u64 = 0x696e_6974;
const SAMPLE_STREAM: u64 = 0x7361_6d70;

/// Half-life, in steps, of the smoothed group counts.
pub const GROUP_COUNT_HALF_LIFE: f64 = 50.0;

/// Encoder followed by the proxy-task classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub encoder: DenseNet,
    pub classifier: DenseNet,
}

impl TaskModel {
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.predict(x)
    }

    /// Class logits for a raw proposal feature.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.classifier.predict(&self.encoder.predict(x)?)
    }
}

/// Networks at the end of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedState {
    pub model: TaskModel,
    pub bank: DiscriminatorBank,
}

/// One evaluation snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of completed optimizer steps.
    pub step: usize,
    pub lr: f64,
    /// Loss components averaged over the steps since the previous record.
    pub loss_det: f64,
    pub loss_img: f64,
    pub loss_inst: f64,
    pub loss_total: f64,
    pub target_accuracy: f64,
    /// Mean held-out proxy accuracy over the source domains.
    pub source_accuracy: f64,
    /// Group count of the last training image, per domain (sources, then target).
    pub n_groups: Vec<usize>,
    /// Exponentially smoothed group counts, per domain.
    pub n_groups_smoothed: Vec<f64>,
    /// Balanced held-out accuracy of each image-level discriminator.
    pub disc_acc_image: Vec<f64>,
    /// Balanced held-out accuracy of each instance-level discriminator.
    pub disc_acc_instance: Vec<f64>,
    /// Distance between source and target class centroids in feature space.
    pub centroid_gap: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub n_sources: usize,
    pub n_classes: usize,
    pub records: Vec<EvalRecord>,
    /// Mean groups per training image over the whole run, per domain.
    pub mean_groups: Vec<f64>,
    /// Mean proposals per training image over the whole run, per domain.
    pub mean_proposals: Vec<f64>,
}

impl MetricsTrace {
    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    /// Mean of the per-domain whole-run group counts.
    pub fn mean_group_count(&self) -> f64 {
        mean(&self.mean_groups)
    }

    pub fn mean_proposal_count(&self) -> f64 {
        mean(&self.mean_proposals)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn domain_of(index: usize, n_sources: usize) -> DomainId {
    if index < n_sources {
        DomainId::Source(index)
    } else {
        DomainId::Target
    }
}

struct Datasets {
    train: Vec<SyntheticDataset>,
    eval: Vec<SyntheticDataset>,
}

fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let k = cfg.n_sources();
    let specs: Vec<_> = cfg.sources.iter().chain([&cfg.target]).collect();
    let mut train = Vec::with_capacity(k + 1);
    let mut eval = Vec::with_capacity(k + 1);
    for (d, spec) in specs.into_iter().enumerate() {
        let domain = domain_of(d, k);
        train.push(generate(spec, domain, cfg.data.train_images, substream_seed(cfg.seed, TRAIN_STREAM + d as u64))?);
        eval.push(generate(spec, domain, cfg.data.eval_images, substream_seed(cfg.seed, EVAL_STREAM + d as u64))?);
    }
    Ok(Datasets { train, eval })
}

/// Encoded proposals of one image with their tapes and gradient buffers.
struct EncodedImage<'a> {
    sample: &'a ImageSample,
    feats: Vec<Vec<f64>>,
    tapes: Vec<Tape>,
    grads: Vec<Vec<f64>>,
    image: Vec<f64>,
    image_tape: Tape,
    image_grad: Vec<f64>,
}

impl<'a> EncodedImage<'a> {
    fn new(encoder: &DenseNet, sample: &'a ImageSample) -> Result<Self> {
        let mut feats = Vec::with_capacity(sample.proposals.len());
        let mut tapes = Vec::with_capacity(sample.proposals.len());
        for p in &sample.proposals {
            let (z, tape) = encoder.forward(&p.feature)?;
            feats.push(z);
            tapes.push(tape);
        }
        let (image, image_tape) = encoder.forward(&sample.image_feature)?;
        let dim = encoder.output_dim();
        Ok(EncodedImage {
            sample,
            grads: vec![vec![0.0; dim]; feats.len()],
            feats,
            tapes,
            image_grad: vec![0.0; dim],
            image,
            image_tape,
        })
    }

    fn groups(&self, cfg: &ExperimentConfig) -> Result<Vec<GroupEmbedding>> {
        encoded_groups(cfg, self.sample, &self.feats)
    }

    /// Spread each group's gradient evenly over its members.
    fn distribute(&mut self, groups: &[GroupEmbedding], grads: &[Vec<f64>], scale: f64) {
        if scale == 0.0 {
            return;
        }
        for (g, grad) in groups.iter().zip(grads) {
            let w = scale / g.member_count as f64;
            for &m in &g.members {
                for (acc, v) in self.grads[m].iter_mut().zip(grad) {
                    *acc += w * v;
                }
            }
        }
    }

    fn add_image_grad(&mut self, grad: &[f64], scale: f64) {
        if scale == 0.0 {
            return;
        }
        for (acc, v) in self.image_grad.iter_mut().zip(grad) {
            *acc += scale * v;
        }
    }

    fn backward(&self, encoder: &mut DenseNet) -> Result<()> {
        for (tape, grad) in self.tapes.iter().zip(&self.grads) {
            if grad.iter().any(|&g| g != 0.0) {
                encoder.backward(tape, grad)?;
            }
        }
        if self.image_grad.iter().any(|&g| g != 0.0) {
            encoder.backward(&self.image_tape, &self.image_grad)?;
        }
        Ok(())
    }
}

/// Instance-level groups of one image, built on encoded features.
fn encoded_groups(cfg: &ExperimentConfig, sample: &ImageSample, feats: &[Vec<f64>]) -> Result<Vec<GroupEmbedding>> {
    match cfg.mode.grouping() {
        None => Ok(feats
            .iter()
            .zip(&sample.proposals)
            .enumerate()
            .map(|(i, (z, p))| GroupEmbedding {
                vector: z.clone(),
                member_count: 1,
                class_tag: p.pseudo_label,
                members: vec![i],
            })
            .collect()),
        Some(mode) => {
            let props: Vec<Proposal> = feats
                .iter()
                .zip(&sample.proposals)
                .map(|(z, p)| Proposal {
                    feature: z.clone(),
                    pseudo_label: p.pseudo_label,
                    bbox: p.bbox,
                    domain: p.domain,
                })
                .collect();
            cluster_by_mode(&props, mode, cfg.metric, cfg.stop)
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct StepLosses {
    det: f64,
    img: f64,
    inst: f64,
    total: f64,
}

impl std::ops::AddAssign for StepLosses {
    fn add_assign(&mut self, o: Self) {
        self.det += o.det;
        self.img += o.img;
        self.inst += o.inst;
        self.total += o.total;
    }
}

/// Adversarial alignment of one level. `inputs[d]` holds the vectors domain
/// `d` presents; `route_grads` receives the reversed gradients per domain.
fn adversarial_level(
    cfg: &ExperimentConfig,
    bank: &mut DiscriminatorBank,
    level: Level,
    inputs: &[Vec<Vec<f64>>],
    feature_grl: GrlSpec,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let spec = cfg.topology_spec();
    let k = cfg.n_sources();
    let shared = spec.sharing(level) == Sharing::Shared;
    let discs = bank.level_mut(level);
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(k + 1);
    for (d, vectors) in inputs.iter().enumerate() {
        let domain = domain_of(d, k);
        let routed = route(&spec, domain, level)?;
        // Sources share a common discriminator's source side; the target is
        // averaged over the pair discriminators it is shown to.
        let (disc_weight, loss_weight) = match domain {
            DomainId::Source(_) => (if shared { 1.0 / k as f64 } else { 1.0 }, 1.0 / k as f64),
            DomainId::Target => (1.0, 1.0 / routed.len() as f64),
        };
        let mut domain_grads = vec![vec![0.0; cfg.model.feature_dim]; vectors.len()];
        for j in routed {
            let out = adversarial_loss_weighted(vectors, domain.label(), &mut discs[j], feature_grl, disc_weight)?;
            loss += loss_weight * out.loss;
            for (acc, g) in domain_grads.iter_mut().zip(&out.embedding_grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += loss_weight * v;
                }
            }
        }
        grads.push(domain_grads);
    }
    Ok((loss, grads))
}

fn class_map(groups: &[GroupEmbedding]) -> ClassEmbeddings {
    groups
        .iter()
        .filter_map(|g| g.class_tag.map(|c| (c, g.vector.clone())))
        .collect()
}

/// Contrastive loss between one source's groups and the target's groups.
fn contrastive_pair(
    cfg: &ExperimentConfig,
    source: &[GroupEmbedding],
    target: &[GroupEmbedding],
    mode: InstanceMode,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let dim = cfg.model.feature_dim;
    let mut gs = vec![vec![0.0; dim]; source.len()];
    let mut gt = vec![vec![0.0; dim]; target.len()];
    let mut loss = 0.0;
    let nn_pass = |src_idx: &[usize], tgt_idx: &[usize], gs: &mut [Vec<f64>], gt: &mut [Vec<f64>]| -> Result<f64> {
        let spec = ContrastiveSpec::new(cfg.margin, ContrastiveMode::NearestNeighbor)?;
        let a: Vec<&[f64]> = src_idx.iter().map(|&i| source[i].vector.as_slice()).collect();
        let b: Vec<&[f64]> = tgt_idx.iter().map(|&i| target[i].vector.as_slice()).collect();
        let mut l = 0.0;
        let out = contrastive_nn_matched(&a, &b, spec)?;
        l += out.loss;
        add_indexed(gs, src_idx, &out.source_grads);
        add_indexed(gt, tgt_idx, &out.target_grads);
        if cfg.symmetric_contrastive {
            let back = contrastive_nn_matched(&b, &a, spec)?;
            l += back.loss;
            add_indexed(gt, tgt_idx, &back.source_grads);
            add_indexed(gs, src_idx, &back.target_grads);
        }
        Ok(l)
    };
    match mode {
        InstanceMode::Sg => {
            let spec = ContrastiveSpec::new(cfg.margin, ContrastiveMode::ClassMatched)?;
            let out = contrastive_class_matched(&class_map(source), &class_map(target), spec)?;
            loss += out.loss;
            for (i, g) in source.iter().enumerate() {
                if let Some(grad) = g.class_tag.and_then(|c| out.source_grads.get(&c)) {
                    gs[i] = grad.clone();
                }
            }
            for (i, g) in target.iter().enumerate() {
                if let Some(grad) = g.class_tag.and_then(|c| out.target_grads.get(&c)) {
                    gt[i] = grad.clone();
                }
            }
        }
        InstanceMode::Mg => {
            let classes: std::collections::BTreeSet<usize> = source.iter().filter_map(|g| g.class_tag).collect();
            for c in classes {
                let si: Vec<usize> = (0..source.len()).filter(|&i| source[i].class_tag == Some(c)).collect();
                let ti: Vec<usize> = (0..target.len()).filter(|&i| target[i].class_tag == Some(c)).collect();
                if !ti.is_empty() {
                    loss += nn_pass(&si, &ti, &mut gs, &mut gt)?;
                }
            }
        }
        InstanceMode::MgCa | InstanceMode::Proposals => {
            let si: Vec<usize> = (0..source.len()).collect();
            let ti: Vec<usize> = (0..target.len()).collect();
            loss += nn_pass(&si, &ti, &mut gs, &mut gt)?;
        }
    }
    Ok((loss, gs, gt))
}

fn add_indexed(acc: &mut [Vec<f64>], idx: &[usize], grads: &[Vec<f64>]) {
    for (&i, g) in idx.iter().zip(grads) {
        for (a, v) in acc[i].iter_mut().zip(g) {
            *a += v;
        }
    }
}

/// Forward, losses and backward for one batch (one image per domain).
/// Parameter gradients are left accumulated in the networks.
fn train_step(
    cfg: &ExperimentConfig,
    model: &mut TaskModel,
    bank: &mut DiscriminatorBank,
    images: &[&ImageSample],
    group_counts: &mut [usize],
) -> Result<StepLosses> {
    let k = cfg.n_sources();
    let mut enc: Vec<EncodedImage> = images
        .iter()
        .map(|s| EncodedImage::new(&model.encoder, s))
        .collect::<Result<_>>()?;

    // Supervised proxy task on every source image.
    let mut det = 0.0;
    for e in enc.iter_mut().take(k) {
        let labels = e
            .sample
            .true_labels
            .as_ref()
            .ok_or_else(|| Error::Config("source image without true labels".into()))?;
        let refs: Vec<&[f64]> = e.feats.iter().map(Vec::as_slice).collect();
        let out = classification_loss(&mut model.classifier, &refs, labels, 1.0 / k as f64)?;
        det += out.loss / k as f64;
        for (acc, g) in e.grads.iter_mut().zip(&out.input_grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v / k as f64;
            }
        }
    }

    let groups: Vec<Vec<GroupEmbedding>> = enc.iter().map(|e| e.groups(cfg)).collect::<Result<_>>()?;
    for (count, g) in group_counts.iter_mut().zip(&groups) {
        *count = g.len();
    }

    let adversarial = cfg.alignment == Alignment::Adversarial;
    // Discriminators always train; features only see them in adversarial mode.
    let feature_grl = GrlSpec::new(if adversarial { cfg.grl_lambda } else { 0.0 })?;
    let img_scale = if cfg.image_level && adversarial { cfg.lambda_img } else { 0.0 };
    let inst_scale = if adversarial { cfg.lambda_inst } else { 0.0 };

    let image_inputs: Vec<Vec<Vec<f64>>> = enc.iter().map(|e| vec![e.image.clone()]).collect();
    let (img_adv, img_grads) = adversarial_level(cfg, bank, Level::Image, &image_inputs, feature_grl)?;
    let group_inputs: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|gs| gs.iter().map(|g| g.vector.clone()).collect())
        .collect();
    let (inst_adv, inst_grads) = adversarial_level(cfg, bank, Level::Instance, &group_inputs, feature_grl)?;
    for (d, e) in enc.iter_mut().enumerate() {
        e.add_image_grad(&img_grads[d][0], img_scale);
        e.distribute(&groups[d], &inst_grads[d], inst_scale);
    }

    let (img, inst) = match cfg.alignment {
        Alignment::Adversarial => (if cfg.image_level { img_adv } else { 0.0 }, inst_adv),
        Alignment::Contrastive => {
            let target = k;
            let mut img = 0.0;
            let mut inst = 0.0;
            for s in 0..k {
                if cfg.image_level {
                    let (l, gs, gt) = {
                        let spec = ContrastiveSpec::new(cfg.margin, ContrastiveMode::NearestNeighbor)?;
                        let out = contrastive_nn_matched(&[enc[s].image.as_slice()], &[enc[target].image.as_slice()], spec)?;
                        (out.loss, out.source_grads, out.target_grads)
                    };
                    img += l / k as f64;
                    enc[s].add_image_grad(&gs[0], cfg.lambda_img / k as f64);
                    enc[target].add_image_grad(&gt[0], cfg.lambda_img / k as f64);
                }
                let (l, gs, gt) = contrastive_pair(cfg, &groups[s], &groups[target], cfg.mode)?;
                inst += l / k as f64;
                enc[s].distribute(&groups[s], &gs, cfg.lambda_inst / k as f64);
                enc[target].distribute(&groups[target], &gt, cfg.lambda_inst / k as f64);
            }
            (img, inst)
        }
    };

    for e in &enc {
        e.backward(&mut model.encoder)?;
    }
    let lambda_img = if cfg.image_level { cfg.lambda_img } else { 0.0 };
    Ok(StepLosses {
        det,
        img,
        inst,
        total: composite_loss(det, img, inst, lambda_img, cfg.lambda_inst),
    })
}

/// Balanced accuracy of a discriminator: mean of its per-domain accuracies.
fn balanced_accuracy(disc: &DenseNet, source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    let hit_rate = |xs: &[Vec<f64>], label: u8| -> Result<Option<f64>> {
        if xs.is_empty() {
            return Ok(None);
        }
        let mut hits = 0usize;
        for x in xs {
            let p = disc.predict(x)?[0];
            hits += usize::from((p >= 0.5) == (label == 1));
        }
        Ok(Some(hits as f64 / xs.len() as f64))
    };
    Ok(match (hit_rate(source, 0)?, hit_rate(target, 1)?) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 0.5,
    })
}

fn evaluate(
    cfg: &ExperimentConfig,
    model: &TaskModel,
    bank: &DiscriminatorBank,
    eval: &[SyntheticDataset],
) -> Result<(f64, f64, Vec<f64>, Vec<f64>, Vec<Option<f64>>)> {
    let k = cfg.n_sources();
    let spec = cfg.topology_spec();
    let target_accuracy = accuracy_with(&eval[k].samples, |x| model.predict(x))?;
    let mut source_accuracy = 0.0;
    for ds in &eval[..k] {
        source_accuracy += accuracy_with(&ds.samples, |x| model.predict(x))? / k as f64;
    }

    // Encoded image features, group embeddings and per-class feature sums.
    let dim = cfg.model.feature_dim;
    let c = cfg.n_classes();
    let mut image_vecs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k + 1);
    let mut group_vecs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k + 1);
    let mut sums = vec![vec![vec![0.0; dim]; c]; 2];
    let mut counts = vec![vec![0usize; c]; 2];
    for (d, ds) in eval.iter().enumerate() {
        let side = usize::from(d == k);
        let mut imgs = Vec::with_capacity(ds.samples.len());
        let mut grps = Vec::new();
        for s in &ds.samples {
            imgs.push(model.encode(&s.image_feature)?);
            let feats: Vec<Vec<f64>> = s.proposals.iter().map(|p| model.encode(&p.feature)).collect::<Result<_>>()?;
            if let Some(labels) = &s.true_labels {
                for (z, &l) in feats.iter().zip(labels) {
                    counts[side][l] += 1;
                    for (a, v) in sums[side][l].iter_mut().zip(z) {
                        *a += v;
                    }
                }
            }
            grps.extend(encoded_groups(cfg, s, &feats)?.into_iter().map(|g| g.vector));
        }
        image_vecs.push(imgs);
        group_vecs.push(grps);
    }

    let disc_acc = |level: Level, vecs: &[Vec<Vec<f64>>]| -> Result<Vec<f64>> {
        let discs = bank.level(level);
        (0..discs.len())
            .map(|j| {
                let mut src = Vec::new();
                for (s, v) in vecs.iter().enumerate().take(k) {
                    if route(&spec, DomainId::Source(s), level)?.contains(&j) {
                        src.extend(v.iter().cloned());
                    }
                }
                balanced_accuracy(&discs[j], &src, &vecs[k])
            })
            .collect()
    };
    let disc_image = disc_acc(Level::Image, &image_vecs)?;
    let disc_instance = disc_acc(Level::Instance, &group_vecs)?;

    let centroid_gap = (0..c)
        .map(|l| {
            (counts[0][l] > 0 && counts[1][l] > 0).then(|| {
                let diff: Vec<f64> = sums[0][l]
                    .iter()
                    .zip(&sums[1][l])
                    .map(|(a, b)| a / counts[0][l] as f64 - b / counts[1][l] as f64)
                    .collect();
                l2_norm(&diff)
            })
        })
        .collect();
    Ok((target_accuracy, source_accuracy, disc_image, disc_instance, centroid_gap))
}

fn init_state(cfg: &ExperimentConfig) -> Result<(TaskModel, DiscriminatorBank)> {
    let mut rng = seeded_rng(substream_seed(cfg.seed, INIT_STREAM));
    let fd = cfg.model.feature_dim;
    let mut enc_widths = vec![cfg.input_dim()];
    enc_widths.extend(&cfg.model.encoder_hidden);
    enc_widths.push(fd);
    let encoder = DenseNet::mlp(&enc_widths, Activation::Relu, Activation::Identity, &mut rng)?;
    let mut cls_widths = vec![fd];
    cls_widths.extend(&cfg.model.classifier_hidden);
    cls_widths.push(cfg.n_classes());
    let classifier = DenseNet::mlp(&cls_widths, Activation::Relu, Activation::Identity, &mut rng)?;
    let bank = DiscriminatorBank::new(&cfg.topology_spec(), fd, &cfg.model.disc_hidden, &mut rng)?;
    Ok((TaskModel { encoder, classifier }, bank))
}

/// Run one experiment and return its metrics.
pub fn train(cfg: &ExperimentConfig) -> Result<MetricsTrace> {
    train_with_state(cfg).map(|(trace, _)| trace)
}

/// Run one experiment and also return the final networks.
pub fn train_with_state(cfg: &ExperimentConfig) -> Result<(MetricsTrace, TrainedState)> {
    cfg.validate()?;
    let data = build_datasets(cfg)?;
    if cfg.metric == crate::clustering::DistanceMetric::SpatialIou && cfg.mode != InstanceMode::Proposals {
        for ds in &data.train {
            if let Some(index) = ds.samples.iter().flat_map(|s| &s.proposals).position(|p| p.bbox.is_none()) {
                return Err(Error::MissingBox { index });
            }
        }
    }
    let (mut model, mut bank) = init_state(cfg)?;
    let mut sampler = seeded_rng(substream_seed(cfg.seed, SAMPLE_STREAM));
    let n_domains = cfg.n_sources() + 1;
    let steps = cfg.total_steps();
    let alpha = 1.0 - 0.5f64.powf(1.0 / GROUP_COUNT_HALF_LIFE);

    let mut records = Vec::new();
    let mut counts = vec![0usize; n_domains];
    let mut smoothed: Option<Vec<f64>> = None;
    let mut group_total = vec![0.0; n_domains];
    let mut proposal_total = vec![0.0; n_domains];
    let mut window = StepLosses::default();
    let mut window_len = 0usize;

    for step in 0..steps {
        let lr = cfg.lr_at(step);
        let images: Vec<&ImageSample> = data
            .train
            .iter()
            .map(|ds| &ds.samples[sampler.random_range(0..ds.samples.len())])
            .collect();
        window += train_step(cfg, &mut model, &mut bank, &images, &mut counts)?;
        window_len += 1;

        for d in 0..n_domains {
            group_total[d] += counts[d] as f64;
            proposal_total[d] += images[d].proposals.len() as f64;
        }
        let s = smoothed.get_or_insert_with(|| counts.iter().map(|&c| c as f64).collect());
        for (sm, &c) in s.iter_mut().zip(&counts) {
            *sm += alpha * (c as f64 - *sm);
        }

        let sgd = cfg.sgd(lr);
        model.encoder.sgd_step(sgd);
        model.classifier.sgd_step(sgd);
        let disc_sgd = cfg.sgd(lr * cfg.disc_lr_mult);
        for disc in bank.image_discs.iter_mut().chain(bank.instance_discs.iter_mut()) {
            disc.sgd_step(disc_sgd);
        }

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == steps {
            let (target_accuracy, source_accuracy, disc_acc_image, disc_acc_instance, centroid_gap) =
                evaluate(cfg, &model, &bank, &data.eval)?;
            let n = window_len as f64;
            records.push(EvalRecord {
                step: done,
                lr,
                loss_det: window.det / n,
                loss_img: window.img / n,
                loss_inst: window.inst / n,
                loss_total: window.total / n,
                target_accuracy,
                source_accuracy,
                n_groups: counts.clone(),
                n_groups_smoothed: smoothed.clone().unwrap_or_default(),
                disc_acc_image,
                disc_acc_instance,
                centroid_gap,
            });
            window = StepLosses::default();
            window_len = 0;
        }
    }

    let trace = MetricsTrace {
        n_sources: cfg.n_sources(),
        n_classes: cfg.n_classes(),
        records,
        mean_groups: group_total.iter().map(|t| t / steps as f64).collect(),
        mean_proposals: proposal_total.iter().map(|t| t / steps as f64).collect(),
    };
    Ok((trace, TrainedState { model, bank }))
}
