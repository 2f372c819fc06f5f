mod support;

use rand::{Rng, RngCore};
use support::XoshiroOracle;
use visga::nn::{Activation, Dense, SgdConfig};
use visga::simulate::{accuracy_with, proxy_task_loss, read_jsonl, target_accuracy, Scenario};
use visga::{bce_loss, generate, seeded_rng, DenseNet, DomainId, DomainSpec};

const PINNED: u64 = 5_987_356_902_031_041_503;

fn two_class(dim: usize, sigma: f64, mix: Vec<f64>) -> DomainSpec {
    let mut means = vec![vec![0.0; dim]; 2];
    means[0][0] = 3.0;
    means[1][1] = 3.0;
    DomainSpec {
        class_means: means,
        class_cov_scale: sigma,
        shift: vec![0.0; dim],
        proposals_per_image: (8, 32),
        class_mix: mix,
        label_noise: 0.0,
        overlap_bias: 0.8,
        with_boxes: true,
    }
}

#[test]
fn generator_stream_matches_reference_xoshiro() {
    for seed in [0u64, 1, 42, u64::MAX] {
        let mut lib = seeded_rng(seed);
        let mut oracle = XoshiroOracle::seed_from_u64(seed);
        for _ in 0..8 {
            assert_eq!(lib.next_u64(), oracle.next_u64(), "seed {seed}");
        }
    }
    // First xoshiro256++ output for SplitMix64-expanded seed 0, computed independently.
    assert_eq!(seeded_rng(0).next_u64(), PINNED);
}

#[test]
fn regeneration_is_bit_identical_and_seeds_differ() {
    let spec = Scenario::preset("multi-object").unwrap().target();
    let a = generate(&spec, DomainId::Target, 30, 9).unwrap();
    let b = generate(&spec, DomainId::Target, 30, 9).unwrap();
    assert_eq!(a, b);
    let c = generate(&spec, DomainId::Target, 30, 10).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn class_frequencies_sit_within_three_sigma_binomial_bounds() {
    let mix = vec![0.3, 0.7];
    let spec = two_class(4, 1.0, mix.clone());
    let data = generate(&spec, DomainId::Source(0), 600, 4).unwrap();
    let labels: Vec<usize> = data.samples.iter().flat_map(|s| s.true_labels.clone().unwrap()).collect();
    let n = labels.len() as f64;
    assert!(n >= 10_000.0, "only {n} proposals");
    for (k, &p) in mix.iter().enumerate() {
        let count = labels.iter().filter(|&&l| l == k).count() as f64;
        let bound = 3.0 * (n * p * (1.0 - p)).sqrt();
        assert!((count - n * p).abs() <= bound, "class {k}: {count} vs {}", n * p);
    }
}

#[test]
fn proposal_counts_stay_in_range() {
    let spec = two_class(4, 1.0, vec![0.5, 0.5]);
    let data = generate(&spec, DomainId::Target, 200, 5).unwrap();
    assert!(data.samples.iter().all(|s| (8..=32).contains(&s.proposals.len())));
    let counts: std::collections::BTreeSet<usize> = data.samples.iter().map(|s| s.proposals.len()).collect();
    assert!(counts.contains(&8) && counts.contains(&32));
}

#[test]
fn class_means_converge_within_three_standard_errors() {
    let sc = Scenario {
        n_objects: 2,
        ..Scenario::default()
    };
    let spec = sc.target();
    let data = generate(&spec, DomainId::Target, 400, 6).unwrap();
    for k in 0..spec.n_classes() {
        let feats: Vec<&Vec<f64>> = data
            .samples
            .iter()
            .flat_map(|s| s.proposals.iter().zip(s.true_labels.as_ref().unwrap()))
            .filter(|(_, &l)| l == k)
            .map(|(p, _)| &p.feature)
            .collect();
        let n = feats.len() as f64;
        let se = spec.class_cov_scale / n.sqrt();
        for d in 0..spec.dim() {
            let mean = feats.iter().map(|f| f[d]).sum::<f64>() / n;
            let want = spec.class_means[k][d] + spec.shift[d];
            assert!((mean - want).abs() <= 3.0 * se, "class {k} dim {d}: {mean} vs {want}");
        }
    }
}

#[test]
fn degenerate_gaussian_reproduces_means_exactly() {
    let spec = two_class(3, 0.0, vec![0.5, 0.5]);
    let data = generate(&spec, DomainId::Source(0), 20, 1).unwrap();
    for s in &data.samples {
        for (p, &l) in s.proposals.iter().zip(s.true_labels.as_ref().unwrap()) {
            assert_eq!(p.feature, spec.class_means[l]);
        }
    }
}

#[test]
fn clean_labels_copy_truth_and_noise_rate_matches() {
    let clean = generate(&two_class(4, 1.0, vec![0.5, 0.5]), DomainId::Target, 100, 2).unwrap();
    for s in &clean.samples {
        let pseudo: Vec<usize> = s.proposals.iter().map(|p| p.pseudo_label.unwrap()).collect();
        assert_eq!(&pseudo, s.true_labels.as_ref().unwrap());
    }
    // Resampling over C classes changes a label with probability noise * (C - 1) / C.
    let sc = Scenario::preset("multi-object").unwrap();
    let spec = sc.target();
    let data = generate(&spec, DomainId::Target, 500, 3).unwrap();
    let (mut flipped, mut total) = (0.0, 0.0);
    for s in &data.samples {
        for (p, &l) in s.proposals.iter().zip(s.true_labels.as_ref().unwrap()) {
            total += 1.0;
            if p.pseudo_label != Some(l) {
                flipped += 1.0;
            }
        }
    }
    let c = spec.n_classes() as f64;
    let p = spec.label_noise * (c - 1.0) / c;
    assert!((flipped - total * p).abs() <= 3.0 * (total * p * (1.0 - p)).sqrt());
}

#[test]
fn image_feature_is_proposal_mean() {
    let data = generate(&two_class(5, 1.0, vec![0.5, 0.5]), DomainId::Target, 20, 8).unwrap();
    for s in &data.samples {
        for d in 0..5 {
            let mean = s.proposals.iter().map(|p| p.feature[d]).sum::<f64>() / s.proposals.len() as f64;
            assert!((s.image_feature[d] - mean).abs() < 1e-12);
        }
    }
    let mut empty = two_class(5, 1.0, vec![0.5, 0.5]);
    empty.proposals_per_image = (0, 0);
    let data = generate(&empty, DomainId::Target, 3, 8).unwrap();
    assert!(data.samples.iter().all(|s| s.proposals.is_empty() && s.image_feature == vec![0.0; 5]));
}

#[test]
fn bayes_classifier_on_clean_data_is_nearly_perfect() {
    let spec = two_class(6, 0.3, vec![0.5, 0.5]);
    let data = generate(&spec, DomainId::Target, 100, 12).unwrap();
    // Linear scores x . mu_k - |mu_k|^2 / 2 are Bayes-optimal for equal isotropic covariances.
    let acc = accuracy_with(&data.samples, |x| {
        let scores: Vec<f64> = spec
            .class_means
            .iter()
            .map(|m| m.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - 0.5 * m.iter().map(|a| a * a).sum::<f64>())
            .collect();
        Ok(scores)
    })
    .unwrap();
    assert!(acc > 0.99, "accuracy {acc}");
}

#[test]
fn constant_and_untrained_classifiers_behave_as_expected() {
    let spec = two_class(4, 1.0, vec![0.5, 0.5]);
    let data = generate(&spec, DomainId::Target, 300, 13).unwrap();
    let labels: Vec<usize> = data.samples.iter().flat_map(|s| s.true_labels.clone().unwrap()).collect();
    let n = labels.len() as f64;
    let freq1 = labels.iter().filter(|&&l| l == 1).count() as f64 / n;
    // Zero weights and a bias favouring class 1 always predict class 1.
    let constant =
        DenseNet::from_layers(vec![Dense::new(vec![0.0; 8], vec![0.0, 1.0], Activation::Identity).unwrap()]).unwrap();
    assert_eq!(target_accuracy(&constant, &data.samples).unwrap(), freq1);

    // A random linear map is unrelated to random labels.
    let mut shuffled = data.samples.clone();
    let mut rng = seeded_rng(77);
    for s in &mut shuffled {
        let k = s.proposals.len();
        s.true_labels = Some((0..k).map(|_| rng.random_range(0..2)).collect());
    }
    let untrained = DenseNet::mlp(&[4, 2], Activation::Relu, Activation::Identity, &mut seeded_rng(5)).unwrap();
    let acc = target_accuracy(&untrained, &shuffled).unwrap();
    assert!((acc - 0.5).abs() <= 3.0 * (0.25 / n).sqrt(), "accuracy {acc}");
    assert!(target_accuracy(&untrained, &[]).is_err());
}

#[test]
fn proxy_loss_of_uniform_logits_is_log_c() {
    let spec = two_class(4, 1.0, vec![0.5, 0.5]);
    let data = generate(&spec, DomainId::Source(0), 5, 1).unwrap();
    let mut zero =
        DenseNet::from_layers(vec![Dense::new(vec![0.0; 8], vec![0.0, 0.0], Activation::Identity).unwrap()]).unwrap();
    let out = proxy_task_loss(&mut zero, &data.samples).unwrap();
    assert!((out.loss - 2f64.ln()).abs() < 1e-12);

    let (loss, grad) = visga::simulate::softmax_cross_entropy(&[60.0, -60.0, 0.0], 0).unwrap();
    assert!(loss < 1e-20 && grad.iter().all(|g| g.abs() < 1e-20));
    assert!(visga::simulate::softmax_cross_entropy(&[1.0, 2.0], 2).is_err());
}

#[test]
fn unshifted_domains_cannot_be_told_apart() {
    // Train a discriminator on source-vs-target proposals drawn from the same
    // distribution and measure balanced held-out accuracy, averaged over seeds.
    let spec = two_class(6, 1.0, vec![0.5, 0.5]);
    let mut accs = Vec::new();
    for seed in 0..4u64 {
        let train_s = generate(&spec, DomainId::Source(0), 150, 100 + seed).unwrap();
        let train_t = generate(&spec, DomainId::Target, 150, 200 + seed).unwrap();
        let eval_s = generate(&spec, DomainId::Source(0), 100, 300 + seed).unwrap();
        let eval_t = generate(&spec, DomainId::Target, 100, 400 + seed).unwrap();
        let mut disc = DenseNet::discriminator(6, &[16], &mut seeded_rng(seed)).unwrap();
        let sgd = SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 };
        for epoch in 0..5 {
            for (a, b) in train_s.samples.iter().zip(&train_t.samples) {
                for (sample, label) in [(a, 0u8), (b, 1u8)] {
                    let n = sample.proposals.len().max(1) as f64;
                    for p in &sample.proposals {
                        let (out, tape) = disc.forward(&p.feature).unwrap();
                        let (_, g) = bce_loss(out[0], label);
                        disc.backward(&tape, &[g / n]).unwrap();
                    }
                }
                disc.sgd_step(sgd);
            }
            let _ = epoch;
        }
        let rate = |samples: &[visga::ImageSample], label: u8| {
            let preds: Vec<bool> = samples
                .iter()
                .flat_map(|s| &s.proposals)
                .map(|p| (disc.predict(&p.feature).unwrap()[0] >= 0.5) == (label == 1))
                .collect();
            preds.iter().filter(|&&c| c).count() as f64 / preds.len() as f64
        };
        accs.push(0.5 * (rate(&eval_s.samples, 0) + rate(&eval_t.samples, 1)));
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((0.45..=0.55).contains(&mean), "balanced accuracy {mean} ({accs:?})");
}

#[test]
fn jsonl_round_trip_is_lossless() {
    let spec = Scenario::preset("multi-object").unwrap().target();
    let data = generate(&spec, DomainId::Target, 12, 21).unwrap();
    let mut buf = Vec::new();
    data.write_jsonl(&mut buf).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 12);
    let back = read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, data.samples);
}

#[test]
fn presets_are_valid_and_unknown_names_fail() {
    for name in Scenario::PRESETS {
        let sc = Scenario::preset(name).unwrap();
        for s in sc.sources() {
            s.validate().unwrap();
        }
        sc.target().validate().unwrap();
        let shift = sc.shift(sc.shift_sigmas);
        let norm = shift.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - sc.shift_sigmas * sc.sigma).abs() < 1e-12);
    }
    assert!(Scenario::preset("nope").is_err());
}

#[test]
fn zero_classes_are_rejected() {
    let mut spec = two_class(3, 1.0, vec![0.5, 0.5]);
    spec.class_means.clear();
    spec.class_mix.clear();
    assert!(generate(&spec, DomainId::Target, 1, 0).is_err());
    assert!(generate(&two_class(3, 1.0, vec![0.5, 0.5]), DomainId::Target, 0, 0).is_err());
}
