//! Shared fixtures and brute-force oracles for the integration suites.
#![allow(dead_code)]

use densehybrid::data::{
    gen_negative_patches, gen_scenes, item_rng, AugmentConfig, MixedSource, SceneConfig, SceneSample,
};
use densehybrid::losses::{compound_loss, PixelRole};
use densehybrid::metrics::ScoredPixelSet;
use densehybrid::nn::{forward_graph, Mode, ModelParams, NetworkConfig, SampleSource, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    item_rng(seed, 0xC0FFEE, 0)
}

/// An 8×8 crop with pasted negatives containing both inlier and outlier pixels.
pub fn mixed_sample_8x8(seed: u64) -> SceneSample {
    let scenes = SceneConfig {
        image_size: 16,
        n_train: 4,
        n_val: 0,
        n_test: 0,
        n_negatives: 8,
        negative_min: 3,
        negative_max: 6,
    };
    let splits = gen_scenes(seed, &scenes).unwrap();
    let negatives = gen_negative_patches(seed, &scenes).unwrap();
    let source = MixedSource::new(
        &splits.train,
        &negatives,
        AugmentConfig {
            crop_size: 8,
            seed,
            ..AugmentConfig::default()
        },
    )
    .unwrap();
    for epoch in 0..64 {
        for i in 0..source.len() {
            let s = source.sample(epoch, i).unwrap();
            let outliers = s.mask.count(PixelRole::Outlier);
            let inliers = s.mask.count(PixelRole::Inlier);
            if outliers >= 4 && inliers >= 4 {
                return s;
            }
        }
    }
    panic!("no mixed 8x8 crop found");
}

/// A two-stage 3×3 network with every parameter drawn away from its initial value.
pub fn perturbed_params(seed: u64, input_channels: usize, num_classes: usize) -> ModelParams {
    let mut p = ModelParams::init(NetworkConfig {
        input_channels,
        widths: vec![4, 4],
        num_classes,
        kernel_size: 3,
        seed,
    })
    .unwrap();
    let mut r = rng(seed ^ 0xABCD);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    p
}

/// Training-mode compound loss and its gradient with respect to every parameter tensor.
pub fn loss_and_grads(params: &ModelParams, batch: &[SceneSample], beta: f64) -> (f64, Vec<Tensor>) {
    let (x, targets) = densehybrid::nn::assemble_batch(batch).unwrap();
    let mut pass = forward_graph(params, &x, Mode::Train).unwrap();
    let loss = compound_loss(&mut pass.graph, pass.logits, pass.head_logit, &targets, beta).unwrap();
    let value = pass.graph.value(loss.total).item();
    let grads = pass.graph.backward(loss.total).unwrap();
    let g = pass
        .params
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    (value, g)
}

pub fn loss_only(params: &ModelParams, batch: &[SceneSample], beta: f64) -> f64 {
    let (x, targets) = densehybrid::nn::assemble_batch(batch).unwrap();
    let mut pass = forward_graph(params, &x, Mode::Train).unwrap();
    let loss = compound_loss(&mut pass.graph, pass.logits, pass.head_logit, &targets, beta).unwrap();
    pass.graph.value(loss.total).item()
}

/// Relative error with a small denominator floor for coordinates whose gradient vanishes.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error over up to `per_layer` random coordinates of every parameter tensor.
pub fn worst_fd_error(params: &ModelParams, batch: &[SceneSample], beta: f64, per_layer: usize, seed: u64) -> f64 {
    let h = 1e-5;
    let (_, grads) = loss_and_grads(params, batch, beta);
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for (ti, t) in params.tensors().iter().enumerate() {
        let n = t.len();
        let coords: Vec<usize> = if n <= per_layer {
            (0..n).collect()
        } else {
            (0..per_layer).map(|_| r.random_range(0..n)).collect()
        };
        for c in coords {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data_mut()[c] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data_mut()[c] -= h;
            let fd = (loss_only(&plus, batch, beta) - loss_only(&minus, batch, beta)) / (2.0 * h);
            worst = worst.max(rel_err(grads[ti].data()[c], fd));
        }
    }
    worst
}

/// Random scored set with heavy ties: scores on a coarse grid.
pub fn random_scored_set(r: &mut ChaCha8Rng, max_len: usize) -> ScoredPixelSet {
    let n = r.random_range(2..=max_len);
    let levels = r.random_range(2..=20);
    let mut scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 * 0.25 - 2.0).collect();
    let mut truth: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
    truth[0] = true;
    truth[1] = false;
    // Inject exact ties across classes.
    if n > 3 {
        scores[2] = scores[0];
        scores[3] = scores[1];
    }
    ScoredPixelSet::new(scores, truth).unwrap()
}

/// Threshold sweep: at every distinct score, recall gained times precision of all pixels ≥ t.
pub fn oracle_ap(scores: &[f64], truth: &[bool]) -> f64 {
    let p = truth.iter().filter(|&&t| t).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let sel: Vec<bool> = scores
            .iter()
            .zip(truth)
            .filter(|(&s, _)| s >= t)
            .map(|(_, &y)| y)
            .collect();
        let tp = sel.iter().filter(|&&y| y).count() as f64;
        let recall = tp / p;
        ap += (recall - prev_recall) * tp / sel.len() as f64;
        prev_recall = recall;
    }
    ap
}

/// All positive-negative pairs, ties count one half.
pub fn oracle_auroc(scores: &[f64], truth: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &ti) in truth.iter().enumerate() {
        if !ti {
            continue;
        }
        for (j, &tj) in truth.iter().enumerate() {
            if tj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Largest candidate threshold whose TPR reaches `target`; returns `(tau, fpr)`.
pub fn oracle_fpr_at_tpr(scores: &[f64], truth: &[bool], target: f64) -> (f64, f64) {
    let p = truth.iter().filter(|&&t| t).count() as f64;
    let n = truth.len() as f64 - p;
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(f64::INFINITY);
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    for t in candidates {
        let tp = scores.iter().zip(truth).filter(|(&s, &y)| y && s >= t).count() as f64;
        if tp / p >= target {
            let fp = scores.iter().zip(truth).filter(|(&s, &y)| !y && s >= t).count() as f64;
            return (t, fp / n);
        }
    }
    unreachable!("the lowest score reaches TPR 1")
}
