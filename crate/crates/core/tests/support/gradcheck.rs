//! Finite-difference checks of every hand-written backward pass. Each check
//! draws `batches` random cases from `seed` and reports the first mismatch.

use rand::Rng as _;
use visga::common::Rng;
use visga::losses::{ClassEmbeddings, ContrastiveMode};
use visga::nn::Activation;
use visga::simulate::classification_loss;
use visga::{
    adversarial_loss, bce_loss, contrastive_class_matched, contrastive_nn_matched, seeded_rng, ContrastiveSpec,
    DenseNet, GrlSpec,
};

use super::{compare_gradients, numeric_gradient};

pub const REL: f64 = 1e-4;
pub const ABS: f64 = 1e-6;
pub const H: f64 = 1e-6;

pub fn random_vecs(rng: &mut Rng, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

/// True when no hidden ReLU pre-activation sits within `gap` of its kink,
/// so central differences stay on one linear piece.
pub fn clear_of_kinks(net: &DenseNet, inputs: &[Vec<f64>], gap: f64) -> bool {
    inputs.iter().all(|x| {
        let mut cur = x.clone();
        for layer in net.layers() {
            let z: Vec<f64> = layer
                .weights
                .chunks_exact(layer.inputs)
                .zip(&layer.bias)
                .map(|(row, b)| row.iter().zip(&cur).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect();
            if layer.activation == Activation::Relu && z.iter().any(|v| v.abs() < gap) {
                return false;
            }
            cur = z.iter().map(|&v| layer.activation.apply(v)).collect();
        }
        true
    })
}

/// Every squared distance is at least `gap` away from the margin.
pub fn hinges_clear(a: &[Vec<f64>], b: &[Vec<f64>], margin: f64, gap: f64) -> bool {
    a.iter().all(|x| {
        b.iter().all(|y| {
            let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            (d2 - margin).abs() > gap
        })
    })
}

/// The nearest target of every source embedding wins by at least `gap`.
pub fn matching_stable(src: &[Vec<f64>], tgt: &[Vec<f64>], gap: f64) -> bool {
    src.iter().all(|a| {
        let mut d: Vec<f64> = tgt
            .iter()
            .map(|b| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum())
            .collect();
        d.sort_by(f64::total_cmp);
        d.len() < 2 || d[1] - d[0] > gap
    })
}

fn mean_bce(net: &DenseNet, inputs: &[Vec<f64>], label: u8) -> f64 {
    inputs
        .iter()
        .map(|x| bce_loss(net.predict(x).unwrap()[0], label).0)
        .sum::<f64>()
        / inputs.len() as f64
}

/// Mean BCE through a ReLU discriminator, for parameters and inputs.
pub fn check_bce_mlp(seed: u64, batches: usize) -> Result<(), String> {
    let mut rng = seeded_rng(seed);
    let mut checked = 0;
    while checked < batches {
        let dim = rng.random_range(2..8);
        let mut net = DenseNet::discriminator(dim, &[6, 5], &mut seeded_rng(rng.random())).unwrap();
        // Non-zero biases so the bias path is exercised.
        let mut p = net.params();
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        net.set_params(&p).unwrap();
        let n_inputs = rng.random_range(1..6);
        let inputs = random_vecs(&mut rng, n_inputs, dim, 2.0);
        if !clear_of_kinks(&net, &inputs, 1e-3) {
            continue;
        }
        let label = rng.random_range(0..2u8);
        let out = adversarial_loss(&inputs, label, &mut net, GrlSpec::new(1.0).unwrap()).unwrap();

        let params = net.params();
        let numeric = numeric_gradient(&params, H, |q| {
            let mut probe = net.clone();
            probe.set_params(q).unwrap();
            mean_bce(&probe, &inputs, label)
        });
        compare_gradients(&net.grads(), &numeric, REL, ABS).map_err(|e| format!("bce params: {e}"))?;

        // Embedding gradients come back reversed; undo the sign to compare.
        for (i, x) in inputs.iter().enumerate() {
            let numeric = numeric_gradient(x, H, |q| {
                let mut batch = inputs.clone();
                batch[i] = q.to_vec();
                mean_bce(&net, &batch, label)
            });
            let analytic: Vec<f64> = out.embedding_grads[i].iter().map(|g| -g).collect();
            compare_gradients(&analytic, &numeric, REL, ABS).map_err(|e| format!("bce input {i}: {e}"))?;
        }
        checked += 1;
    }
    Ok(())
}

/// A sigmoid MLP under an arbitrary upstream gradient.
pub fn check_sigmoid_mlp(seed: u64, batches: usize) -> Result<(), String> {
    let mut rng = seeded_rng(seed);
    for _ in 0..batches {
        let widths = [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4)];
        let mut net =
            DenseNet::mlp(&widths, Activation::Sigmoid, Activation::Identity, &mut seeded_rng(rng.random())).unwrap();
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let up: Vec<f64> = (0..widths[2]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective =
            |n: &DenseNet, x: &[f64]| n.predict(x).unwrap().iter().zip(&up).map(|(o, u)| o * u).sum::<f64>();
        let (_, tape) = net.forward(&x).unwrap();
        let dx = net.backward(&tape, &up).unwrap();
        compare_gradients(&dx, &numeric_gradient(&x, H, |q| objective(&net, q)), REL, ABS)
            .map_err(|e| format!("mlp input: {e}"))?;
        let params = net.params();
        let numeric = numeric_gradient(&params, H, |q| {
            let mut probe = net.clone();
            probe.set_params(q).unwrap();
            objective(&probe, &x)
        });
        compare_gradients(&net.grads(), &numeric, REL, ABS).map_err(|e| format!("mlp params: {e}"))?;
    }
    Ok(())
}

fn class_loss(src: &ClassEmbeddings, tgt: &ClassEmbeddings, spec: ContrastiveSpec) -> f64 {
    contrastive_class_matched(src, tgt, spec).unwrap().loss
}

pub fn check_class_contrastive(seed: u64, batches: usize) -> Result<(), String> {
    let mut rng = seeded_rng(seed);
    let mut checked = 0;
    while checked < batches {
        let dim = rng.random_range(1..6);
        let classes = rng.random_range(1..5);
        let margin = rng.random_range(0.5..3.0);
        let spec = ContrastiveSpec::new(margin, ContrastiveMode::ClassMatched).unwrap();
        let src: ClassEmbeddings = (0..classes).map(|c| (c, random_vecs(&mut rng, 1, dim, 1.0).remove(0))).collect();
        let tgt: ClassEmbeddings = (0..classes).map(|c| (c, random_vecs(&mut rng, 1, dim, 1.0).remove(0))).collect();
        let sv: Vec<Vec<f64>> = src.values().cloned().collect();
        let tv: Vec<Vec<f64>> = tgt.values().cloned().collect();
        if !hinges_clear(&sv, &tv, margin, 1e-3) {
            continue;
        }
        let out = contrastive_class_matched(&src, &tgt, spec).unwrap();
        for c in 0..classes {
            let numeric = numeric_gradient(&src[&c], H, |q| {
                let mut s = src.clone();
                s.insert(c, q.to_vec());
                class_loss(&s, &tgt, spec)
            });
            compare_gradients(&out.source_grads[&c], &numeric, REL, ABS)
                .map_err(|e| format!("class-matched source {c}: {e}"))?;
            let numeric = numeric_gradient(&tgt[&c], H, |q| {
                let mut t = tgt.clone();
                t.insert(c, q.to_vec());
                class_loss(&src, &t, spec)
            });
            compare_gradients(&out.target_grads[&c], &numeric, REL, ABS)
                .map_err(|e| format!("class-matched target {c}: {e}"))?;
        }
        checked += 1;
    }
    Ok(())
}

pub fn check_nn_contrastive(seed: u64, batches: usize) -> Result<(), String> {
    let mut rng = seeded_rng(seed);
    let mut checked = 0;
    while checked < batches {
        let dim = rng.random_range(1..6);
        let margin = rng.random_range(0.5..3.0);
        let spec = ContrastiveSpec::new(margin, ContrastiveMode::NearestNeighbor).unwrap();
        let n_src = rng.random_range(1..6);
        let src = random_vecs(&mut rng, n_src, dim, 1.5);
        let n_tgt = rng.random_range(1..6);
        let tgt = random_vecs(&mut rng, n_tgt, dim, 1.5);
        if !hinges_clear(&src, &tgt, margin, 1e-3) || !matching_stable(&src, &tgt, 1e-3) {
            continue;
        }
        let out = contrastive_nn_matched(&src, &tgt, spec).unwrap();
        for i in 0..src.len() {
            let numeric = numeric_gradient(&src[i], H, |q| {
                let mut s = src.clone();
                s[i] = q.to_vec();
                contrastive_nn_matched(&s, &tgt, spec).unwrap().loss
            });
            compare_gradients(&out.source_grads[i], &numeric, REL, ABS)
                .map_err(|e| format!("nn source {i}: {e}"))?;
        }
        for j in 0..tgt.len() {
            let numeric = numeric_gradient(&tgt[j], H, |q| {
                let mut t = tgt.clone();
                t[j] = q.to_vec();
                contrastive_nn_matched(&src, &t, spec).unwrap().loss
            });
            compare_gradients(&out.target_grads[j], &numeric, REL, ABS)
                .map_err(|e| format!("nn target {j}: {e}"))?;
        }
        checked += 1;
    }
    Ok(())
}

/// Softmax cross-entropy through a linear classifier.
pub fn check_proxy_cross_entropy(seed: u64, batches: usize) -> Result<(), String> {
    let mut rng = seeded_rng(seed);
    for _ in 0..batches {
        let dim = rng.random_range(1..6);
        let classes = rng.random_range(2..6);
        let mut net =
            DenseNet::mlp(&[dim, classes], Activation::Relu, Activation::Identity, &mut seeded_rng(rng.random()))
                .unwrap();
        let n_xs = rng.random_range(1..8);
        let xs = random_vecs(&mut rng, n_xs, dim, 2.0);
        let labels: Vec<usize> = xs.iter().map(|_| rng.random_range(0..classes)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let out = classification_loss(&mut net, &refs, &labels, 1.0).unwrap();
        let loss_of = |n: &DenseNet, xs: &[Vec<f64>]| {
            let r: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            classification_loss(&mut n.clone(), &r, &labels, 0.0).unwrap().loss
        };
        let params = net.params();
        let numeric = numeric_gradient(&params, H, |q| {
            let mut probe = net.clone();
            probe.set_params(q).unwrap();
            loss_of(&probe, &xs)
        });
        compare_gradients(&net.grads(), &numeric, REL, ABS).map_err(|e| format!("proxy params: {e}"))?;
        for i in 0..xs.len() {
            let numeric = numeric_gradient(&xs[i], H, |q| {
                let mut b = xs.clone();
                b[i] = q.to_vec();
                loss_of(&net, &b)
            });
            compare_gradients(&out.input_grads[i], &numeric, REL, ABS).map_err(|e| format!("proxy input {i}: {e}"))?;
        }
    }
    Ok(())
}
