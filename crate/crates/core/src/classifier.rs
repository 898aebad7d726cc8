//! The biased relation classifier.
//!
//! A linear softmax head over `K + 1` classes (index 0 is background) trained
//! with mini-batch SGD on observed labels `s`, so unlabeled positives are
//! treated as background. Training exposes a per-batch hook that sees the
//! forward-pass probabilities; label-frequency estimation attaches there.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json_atomic};
use crate::rng;
use crate::synth::{GenConfig, RelationExample};

/// A distribution over `0..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidInput("probabilities must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Softmax of `logits`, shifted by the max for stability.
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `p(s = class | x)`.
    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Number of foreground classes `K`.
    pub fn num_classes(&self) -> usize {
        self.0.len() - 1
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }
}

/// Weights of shape `(K + 1) x (d + 1)`, row-major; the last column is the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    num_classes: usize,
    feature_dim: usize,
    weights: Vec<f64>,
}

impl ClassifierParams {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            weights: vec![0.0; (num_classes + 1) * (feature_dim + 1)],
        }
    }

    pub fn from_weights(num_classes: usize, feature_dim: usize, weights: Vec<f64>) -> Result<Self> {
        let expected = (num_classes + 1) * (feature_dim + 1);
        if weights.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("non-finite classifier weight".into()));
        }
        Ok(Self {
            num_classes,
            feature_dim,
            weights,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn row(&self, class: usize) -> &[f64] {
        let w = self.feature_dim + 1;
        &self.weights[class * w..(class + 1) * w]
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: x.len(),
            });
        }
        Ok((0..=self.num_classes)
            .map(|c| {
                let row = self.row(c);
                row[..self.feature_dim]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + row[self.feature_dim]
            })
            .collect())
    }
}

/// Biased posterior `p̃(s | x) = softmax(W · [x; 1])`.
pub fn predict(params: &ClassifierParams, x: &[f64]) -> Result<ProbabilityVector> {
    Ok(ProbabilityVector::softmax(&params.logits(x)?))
}

/// One term of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct WeightedSample<'a> {
    pub x: &'a [f64],
    pub label: usize,
    pub weight: f64,
}

/// Mean weighted cross-entropy and its gradient with respect to the weights.
pub fn loss_and_gradient(
    params: &ClassifierParams,
    samples: &[WeightedSample<'_>],
) -> Result<(f64, Vec<f64>)> {
    let probs = samples
        .iter()
        .map(|s| predict(params, s.x))
        .collect::<Result<Vec<_>>>()?;
    Ok(loss_and_gradient_from_probs(params, samples, &probs))
}

fn loss_and_gradient_from_probs(
    params: &ClassifierParams,
    samples: &[WeightedSample<'_>],
    probs: &[ProbabilityVector],
) -> (f64, Vec<f64>) {
    let d = params.feature_dim;
    let width = d + 1;
    let n = samples.len().max(1) as f64;
    let mut grad = vec![0.0; params.weights.len()];
    let mut loss = 0.0;
    for (s, p) in samples.iter().zip(probs) {
        loss -= s.weight * p.get(s.label).max(f64::MIN_POSITIVE).ln();
        for c in 0..=params.num_classes {
            let err = s.weight * (p.get(c) - if c == s.label { 1.0 } else { 0.0 }) / n;
            if err == 0.0 {
                continue;
            }
            let row = &mut grad[c * width..(c + 1) * width];
            for (g, v) in row[..d].iter_mut().zip(s.x) {
                *g += err * v;
            }
            row[d] += err;
        }
    }
    (loss / n, grad)
}

/// Update rule. Adam scales each coordinate by its running gradient
/// magnitude, so rarely-labeled classes learn as fast as frequent ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub warmup_iters: usize,
    pub batch_size_images: usize,
    pub bg_to_fg_ratio: f64,
    pub max_pairs_per_image: usize,
    pub max_iters: usize,
    /// Consecutive non-improving validation evaluations before a decay.
    pub plateau_patience: usize,
    pub max_lr_decays: usize,
    pub lr_decay_factor: f64,
    pub optimizer: Optimizer,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f64,
    /// L2 penalty on the non-bias weights.
    pub weight_decay: f64,
    /// Fraction of images held out for plateau detection.
    pub val_fraction: f64,
    pub reweight: bool,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.01,
            warmup_iters: 500,
            batch_size_images: 4,
            bg_to_fg_ratio: 3.0,
            max_pairs_per_image: 1024,
            max_iters: 3000,
            plateau_patience: 2,
            max_lr_decays: 2,
            lr_decay_factor: 10.0,
            optimizer: Optimizer::Sgd,
            momentum: 0.9,
            weight_decay: 0.0,
            val_fraction: 0.1,
            reweight: false,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_init", self.lr_init),
            ("bg_to_fg_ratio", self.bg_to_fg_ratio),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size_images == 0 || self.max_pairs_per_image == 0 {
            return Err(Error::InvalidConfig(
                "batch_size_images and max_pairs_per_image must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate at `iteration` after `decays` decays: linear warmup to
    /// `lr_init`, then step decay.
    pub fn learning_rate(&self, iteration: usize, decays: usize) -> f64 {
        let warm = if self.warmup_iters == 0 {
            1.0
        } else {
            ((iteration + 1) as f64 / self.warmup_iters as f64).min(1.0)
        };
        self.lr_init * warm / self.lr_decay_factor.powi(decays as i32)
    }
}

/// All relation examples of one image for one epoch, with per-example
/// validity (both endpoints matched to ground truth).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageExamples {
    pub image_id: u64,
    pub examples: Vec<RelationExample>,
    pub valid: Vec<bool>,
}

/// Supplies the training examples of each image, per epoch. Detection
/// settings return a fresh augmented realization every epoch.
pub trait EpochSource {
    fn num_images(&self) -> usize;
    fn image(&self, epoch: usize, index: usize) -> Result<ImageExamples>;
}

/// A fixed example set where every pair is valid.
#[derive(Clone, Debug)]
pub struct StaticExamples {
    images: Vec<ImageExamples>,
}

impl StaticExamples {
    pub fn new(examples: &[RelationExample]) -> Self {
        let mut grouped: BTreeMap<u64, Vec<RelationExample>> = BTreeMap::new();
        for e in examples {
            grouped.entry(e.image_id).or_default().push(e.clone());
        }
        Self {
            images: grouped
                .into_iter()
                .map(|(image_id, examples)| ImageExamples {
                    image_id,
                    valid: vec![true; examples.len()],
                    examples,
                })
                .collect(),
        }
    }
}

impl EpochSource for StaticExamples {
    fn num_images(&self) -> usize {
        self.images.len()
    }

    fn image(&self, _epoch: usize, index: usize) -> Result<ImageExamples> {
        Ok(self.images[index].clone())
    }
}

/// What the per-batch hook sees: the sampled batch and its forward pass.
pub struct BatchView<'a> {
    pub epoch: usize,
    pub iteration: usize,
    pub examples: &'a [&'a RelationExample],
    pub valid: &'a [bool],
    pub probs: &'a [ProbabilityVector],
}

pub type BatchHook<'h> = dyn FnMut(&BatchView<'_>) -> Result<()> + 'h;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_loss: Vec<f64>,
    pub iterations: usize,
    pub lr_decays: usize,
    pub early_stopped: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    pub history: TrainHistory,
}

/// Per-image pair sampling: every labeled pair, plus unlabeled pairs at
/// `bg_to_fg_ratio` per labeled pair, capped at `max_pairs_per_image`.
pub fn sample_image_pairs(image: &ImageExamples, cfg: &TrainConfig, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = rng::stream(seed, "pair-sample", &[epoch as u64, image.image_id]);
    let (mut fg, mut bg): (Vec<usize>, Vec<usize>) =
        (0..image.examples.len()).partition(|&i| image.examples[i].s != 0);
    if fg.len() > cfg.max_pairs_per_image {
        fg.shuffle(&mut rng);
        fg.truncate(cfg.max_pairs_per_image);
    }
    let wanted = (cfg.bg_to_fg_ratio * fg.len().max(1) as f64).ceil() as usize;
    let n_bg = wanted
        .min(bg.len())
        .min(cfg.max_pairs_per_image - fg.len());
    bg.shuffle(&mut rng);
    bg.truncate(n_bg);
    let mut out = fg;
    out.extend(bg);
    out.sort_unstable();
    out
}

/// Inverse labeled-frequency weights over classes `1..=K`, normalized to
/// mean 1 over observed classes and clipped to `[0.1, 10]`. Index 0
/// (background) and unobserved classes get weight 1.
pub fn reweight_factors(labeled_counts: &[usize]) -> Vec<f64> {
    let k = labeled_counts.len();
    let mut w = vec![1.0; k + 1];
    let inv: Vec<(usize, f64)> = labeled_counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(r, &n)| (r + 1, 1.0 / n as f64))
        .collect();
    if inv.is_empty() {
        return w;
    }
    let mean = inv.iter().map(|(_, v)| v).sum::<f64>() / inv.len() as f64;
    for (class, v) in inv {
        w[class] = (v / mean).clamp(0.1, 10.0);
    }
    w
}

/// Splits image indices `0..n_images` into (training, held-out validation),
/// both sorted. At least one image always stays in training.
pub fn validation_split(n_images: usize, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_images).collect();
    order.shuffle(&mut rng::stream(cfg.rng_seed, "val-split", &[]));
    let n_val = ((n_images as f64 * cfg.val_fraction).round() as usize).min(n_images.saturating_sub(1));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn mean_loss(params: &ClassifierParams, examples: &[RelationExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for e in examples {
        let p = predict(params, &e.x)?;
        total -= p.get(e.s).max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / examples.len() as f64)
}

/// Trains the biased classifier on observed labels.
///
/// The schedule is linear warmup to `lr_init`, then step decay by
/// `lr_decay_factor` whenever validation loss fails to improve for
/// `plateau_patience` consecutive epochs; once `max_lr_decays` decays have
/// happened, the next plateau stops training. The final parameters are
/// returned, not the best ones.
pub fn train_biased<S: EpochSource + ?Sized>(
    source: &S,
    num_classes: usize,
    feature_dim: usize,
    cfg: &TrainConfig,
    mut hook: Option<&mut BatchHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_images = source.num_images();
    if n_images == 0 {
        return Err(Error::InvalidInput("empty training corpus".into()));
    }
    let seed = cfg.rng_seed;
    let (train_images, val_images) = validation_split(n_images, cfg);

    let class_weights = if cfg.reweight {
        let mut counts = vec![0usize; num_classes];
        for &i in &train_images {
            for e in source.image(0, i)?.examples {
                if e.s != 0 {
                    counts[e.s - 1] += 1;
                }
            }
        }
        reweight_factors(&counts)
    } else {
        vec![1.0; num_classes + 1]
    };

    // One fixed draw of the held-out images keeps the plateau signal free of
    // augmentation noise.
    let mut val_examples = Vec::new();
    for &i in &val_images {
        val_examples.extend(source.image(0, i)?.examples);
    }

    let mut params = ClassifierParams::zeros(num_classes, feature_dim);
    let mut velocity = vec![0.0; params.weights.len()];
    let mut second_moment = vec![0.0; params.weights.len()];
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let mut bad_evals = 0usize;
    let mut decays = 0usize;
    let mut iteration = 0usize;
    let mut epoch = 0usize;

    'training: while iteration < cfg.max_iters {
        let mut epoch_order = train_images.clone();
        epoch_order.shuffle(&mut rng::stream(seed, "epoch-order", &[epoch as u64]));
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;

        for chunk in epoch_order.chunks(cfg.batch_size_images) {
            if iteration >= cfg.max_iters {
                break;
            }
            let images = chunk
                .iter()
                .map(|&i| source.image(epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let mut batch: Vec<&RelationExample> = Vec::new();
            let mut valid = Vec::new();
            for img in &images {
                for idx in sample_image_pairs(img, cfg, seed, epoch) {
                    batch.push(&img.examples[idx]);
                    valid.push(img.valid[idx]);
                }
            }
            if batch.is_empty() {
                continue;
            }
            let probs = batch
                .iter()
                .map(|e| predict(&params, &e.x))
                .collect::<Result<Vec<_>>>()?;
            if let Some(h) = hook.as_mut() {
                h(&BatchView {
                    epoch,
                    iteration,
                    examples: &batch,
                    valid: &valid,
                    probs: &probs,
                })?;
            }
            let samples: Vec<WeightedSample<'_>> = batch
                .iter()
                .map(|e| WeightedSample {
                    x: &e.x,
                    label: e.s,
                    weight: class_weights[e.s],
                })
                .collect();
            let (loss, mut grad) = loss_and_gradient_from_probs(&params, &samples, &probs);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration, loss });
            }
            if cfg.weight_decay > 0.0 {
                let width = feature_dim + 1;
                for (i, (g, w)) in grad.iter_mut().zip(&params.weights).enumerate() {
                    if i % width != feature_dim {
                        *g += cfg.weight_decay * w;
                    }
                }
            }
            let lr = cfg.learning_rate(iteration, decays);
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for ((w, v), g) in params.weights.iter_mut().zip(&mut velocity).zip(&grad) {
                        *v = cfg.momentum * *v - lr * g;
                        *w += *v;
                    }
                }
                Optimizer::Adam => {
                    let t = (iteration + 1) as i32;
                    let c1 = 1.0 - cfg.momentum.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for (((w, m), v), g) in params
                        .weights
                        .iter_mut()
                        .zip(&mut velocity)
                        .zip(&mut second_moment)
                        .zip(&grad)
                    {
                        *m = cfg.momentum * *m + (1.0 - cfg.momentum) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
            loss_sum += loss;
            loss_batches += 1;
            iteration += 1;
        }
        if loss_batches == 0 {
            return Err(Error::InvalidInput("training images have no relation pairs".into()));
        }
        history.epoch_train_loss.push(loss_sum / loss_batches as f64);

        if !val_examples.is_empty() {
            let val_loss = mean_loss(&params, &val_examples)?;
            if !val_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    loss: val_loss,
                });
            }
            history.epoch_val_loss.push(val_loss);
            if val_loss < best_val {
                best_val = val_loss;
                bad_evals = 0;
            } else {
                bad_evals += 1;
                if bad_evals >= cfg.plateau_patience {
                    bad_evals = 0;
                    if decays >= cfg.max_lr_decays {
                        history.early_stopped = true;
                        break 'training;
                    }
                    decays += 1;
                    log::debug!("epoch {epoch}: validation plateau, lr decay #{decays}");
                }
            }
        }
        epoch += 1;
    }
    history.iterations = iteration;
    history.lr_decays = decays;
    Ok(TrainOutcome { params, history })
}

fn log_gaussian_scores(cfg: &GenConfig, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != cfg.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.feature_dim,
            actual: x.len(),
        });
    }
    let marginal = cfg.pair_class_marginal();
    let mut centers = vec![cfg.background()];
    centers.extend(cfg.centers()?);
    let two_var = 2.0 * cfg.noise_sigma * cfg.noise_sigma;
    Ok(centers
        .iter()
        .zip(&marginal)
        .map(|(mu, prior)| {
            let dist2: f64 = mu.iter().zip(x).map(|(m, v)| (m - v).powi(2)).sum();
            prior.ln() - dist2 / two_var
        })
        .collect())
}

/// True class posterior `p(y | x)` of the generative model, over `0..=K`.
pub fn oracle_unbiased_posterior(cfg: &GenConfig, x: &[f64]) -> Result<ProbabilityVector> {
    Ok(ProbabilityVector::softmax(&log_gaussian_scores(cfg, x)?))
}

/// Biased posterior of the generative model under SCAR:
/// `p(s = r | x) = c_r p(y = r | x)` and `p(s = 0 | x)` takes the rest.
pub fn oracle_biased_posterior(cfg: &GenConfig, x: &[f64]) -> Result<ProbabilityVector> {
    let py = oracle_unbiased_posterior(cfg, x)?;
    let c = cfg.c_true();
    let mut ps = Vec::with_capacity(py.0.len());
    let mut background = py.get(0);
    ps.push(0.0);
    for (r, cr) in c.iter().enumerate() {
        let p = py.get(r + 1);
        ps.push(cr * p);
        background += (1.0 - cr) * p;
    }
    ps[0] = background;
    Ok(ProbabilityVector(ps))
}

pub const WEIGHTS_LAYOUT: &str = "row-major (K+1) x (d+1) float64 little-endian; last column is the bias";

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub layout: String,
    pub schedule: TrainConfig,
    pub weights_file: String,
    pub weights_sha256: String,
}

pub fn save_params(
    dir: &Path,
    stem: &str,
    params: &ClassifierParams,
    schedule: &TrainConfig,
) -> Result<()> {
    let blob: Vec<u8> = params.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
    let weights_file = format!("{stem}.weights.bin");
    write_atomic(&dir.join(&weights_file), &blob)?;
    let manifest = ParamsManifest {
        num_classes: params.num_classes,
        feature_dim: params.feature_dim,
        layout: WEIGHTS_LAYOUT.to_string(),
        schedule: schedule.clone(),
        weights_file,
        weights_sha256: hex::encode(Sha256::digest(&blob)),
    };
    write_json_atomic(&dir.join(format!("{stem}.params.json")), &manifest)
}

pub fn load_params(dir: &Path, stem: &str) -> Result<(ClassifierParams, ParamsManifest)> {
    let manifest: ParamsManifest = read_json(&dir.join(format!("{stem}.params.json")))?;
    let path = dir.join(&manifest.weights_file);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.weights_sha256 {
        return Err(Error::Integrity {
            path,
            reason: "weights checksum mismatch".into(),
        });
    }
    if blob.len() % 8 != 0 {
        return Err(Error::Integrity {
            path,
            reason: "blob length is not a multiple of 8".into(),
        });
    }
    let weights = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let params = ClassifierParams::from_weights(manifest.num_classes, manifest.feature_dim, weights)?;
    Ok((params, manifest))
}
