//! Synthetic long-tailed relation corpora with known label frequencies.
//!
//! Every ordered object pair of a scene is one [`RelationExample`]. Pairs that
//! carry a ground-truth predicate `y = r` draw their feature vector from an
//! isotropic Gaussian around the class-`r` region center; all other pairs
//! draw from a separate background region. With centers far apart relative
//! to the noise, `p(y = r | x)` is effectively 1 inside region `r`, which makes
//! the analytic posteriors in [`crate::classifier`] exact references.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng;

/// Box coordinates are quantized to this grid so that mirroring is exact.
const BOX_GRID: f64 = 1024.0;

/// Minimum center separation, in units of the feature noise sigma.
pub const MIN_SEPARATION_SIGMAS: f64 = 6.0;

/// Axis-aligned box in normalized `[0, 1]` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Mirrors the box about the vertical image axis (`x' = 1 - x`).
    pub fn flipped(&self) -> BBox {
        let a = 1.0 - self.x1;
        let b = 1.0 - self.x2;
        BBox {
            x1: a.min(b),
            y1: self.y1,
            x2: a.max(b),
            y2: self.y2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class: usize,
}

/// A ground-truth relation. `predicate` is in `1..=K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtRelation {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: u64,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<GtRelation>,
}

impl Scene {
    /// Predicate of the ground-truth relation on `(subject, object)`, if any.
    pub fn predicate_of(&self, subject: usize, object: usize) -> Option<usize> {
        self.relations
            .iter()
            .find(|r| r.subject == subject && r.object == object)
            .map(|r| r.predicate)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.bbox.width() > 0.0 && o.bbox.height() > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "image {} object {i} has a degenerate box",
                    self.image_id
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.relations {
            if r.subject == r.object {
                return Err(Error::InvalidInput(format!(
                    "image {}: relation on a self pair",
                    self.image_id
                )));
            }
            if r.subject >= self.objects.len() || r.object >= self.objects.len() {
                return Err(Error::InvalidInput(format!(
                    "image {}: relation endpoint out of range",
                    self.image_id
                )));
            }
            if !seen.insert((r.subject, r.object)) {
                return Err(Error::InvalidInput(format!(
                    "image {}: two predicates on pair ({}, {})",
                    self.image_id, r.subject, r.object
                )));
            }
        }
        Ok(())
    }
}

/// Ordered (subject, object) pair of object indices within one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct PairKey {
    pub subject: usize,
    pub object: usize,
}

impl PairKey {
    pub fn new(subject: usize, object: usize) -> Self {
        Self { subject, object }
    }
}

impl From<[usize; 2]> for PairKey {
    fn from(v: [usize; 2]) -> Self {
        PairKey::new(v[0], v[1])
    }
}

impl From<PairKey> for [usize; 2] {
    fn from(p: PairKey) -> Self {
        [p.subject, p.object]
    }
}

/// One subject-object pair. `s` is the observed label (0 = unlabeled) and `y`
/// the latent true class (0 = background).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationExample {
    pub image_id: u64,
    pub pair: PairKey,
    pub x: Vec<f64>,
    pub s: usize,
    pub y: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionNoise {
    pub miss_prob: f64,
    pub box_jitter_sigma: f64,
    pub label_error_prob: f64,
}

impl Default for DetectionNoise {
    fn default() -> Self {
        Self {
            miss_prob: 0.3,
            box_jitter_sigma: 0.02,
            label_error_prob: 0.1,
        }
    }
}

impl DetectionNoise {
    pub fn none() -> Self {
        Self {
            miss_prob: 0.0,
            box_jitter_sigma: 0.0,
            label_error_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("miss_prob", self.miss_prob),
            ("label_error_prob", self.label_error_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if !(self.box_jitter_sigma >= 0.0 && self.box_jitter_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "box_jitter_sigma = {} must be finite and >= 0",
                self.box_jitter_sigma
            )));
        }
        Ok(())
    }
}

/// Predicate prior over classes `1..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassPrior {
    Explicit(Vec<f64>),
    /// `prior[r] ∝ ratio^(r-1)`.
    Geometric { geometric_ratio: f64 },
}

/// Feature-space location of each class region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CenterLayout {
    Explicit(Vec<Vec<f64>>),
    /// Class `r` sits at `scale * e_r`; requires `feature_dim >= K`.
    OneHot { one_hot_scale: f64 },
}

/// Per-class label frequencies `c_r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrequencyProfile {
    Explicit(Vec<f64>),
    /// Linear interpolation from `head` (class 1) to `tail` (class K).
    Linear { head: f64, tail: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_prior: ClassPrior,
    pub region_centers: CenterLayout,
    /// Center of the background region; the origin when absent.
    pub background_center: Option<Vec<f64>>,
    pub noise_sigma: f64,
    pub label_frequencies: FrequencyProfile,
    pub num_images: usize,
    pub objects_per_image: usize,
    /// Ground-truth relations (positive pairs) per image.
    pub pairs_per_image: usize,
    /// Clustered scenes: each image draws this many distinct predicates from
    /// the prior, every relation takes one of them uniformly, and all
    /// relations of one predicate share a subject object. Rare predicates then
    /// arrive in bursts inside few images.
    pub theme_size: Option<usize>,
    pub num_object_classes: usize,
    pub detection: DetectionNoise,
    pub iou_threshold: f64,
    pub rng_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            feature_dim: 20,
            class_prior: ClassPrior::Geometric {
                geometric_ratio: 0.8,
            },
            region_centers: CenterLayout::OneHot { one_hot_scale: 4.0 },
            background_center: None,
            noise_sigma: 0.5,
            label_frequencies: FrequencyProfile::Linear {
                head: 0.9,
                tail: 0.2,
            },
            num_images: 400,
            objects_per_image: 12,
            pairs_per_image: 24,
            theme_size: None,
            num_object_classes: 10,
            detection: DetectionNoise::default(),
            iou_threshold: 0.5,
            rng_seed: 0,
        }
    }
}

/// Normalized geometric prior of length `k`.
pub fn geometric_prior(k: usize, ratio: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|i| ratio.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

pub fn one_hot_centers(k: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|r| {
            let mut c = vec![0.0; dim];
            c[r] = scale;
            c
        })
        .collect()
}

pub fn linear_frequencies(k: usize, head: f64, tail: f64) -> Vec<f64> {
    if k == 1 {
        return vec![head];
    }
    (0..k)
        .map(|i| head + (tail - head) * i as f64 / (k - 1) as f64)
        .collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl GenConfig {
    pub fn prior(&self) -> Vec<f64> {
        match &self.class_prior {
            ClassPrior::Explicit(p) => p.clone(),
            ClassPrior::Geometric { geometric_ratio } => {
                geometric_prior(self.num_classes, *geometric_ratio)
            }
        }
    }

    pub fn centers(&self) -> Result<Vec<Vec<f64>>> {
        match &self.region_centers {
            CenterLayout::Explicit(c) => Ok(c.clone()),
            CenterLayout::OneHot { one_hot_scale } => {
                if self.feature_dim < self.num_classes {
                    return Err(Error::InvalidConfig(format!(
                        "one-hot centers need feature_dim >= num_classes ({} < {})",
                        self.feature_dim, self.num_classes
                    )));
                }
                Ok(one_hot_centers(self.num_classes, self.feature_dim, *one_hot_scale))
            }
        }
    }

    pub fn background(&self) -> Vec<f64> {
        self.background_center
            .clone()
            .unwrap_or_else(|| vec![0.0; self.feature_dim])
    }

    pub fn c_true(&self) -> Vec<f64> {
        match &self.label_frequencies {
            FrequencyProfile::Explicit(c) => c.clone(),
            FrequencyProfile::Linear { head, tail } => {
                linear_frequencies(self.num_classes, *head, *tail)
            }
        }
    }

    /// Marginal probability that a random ordered pair is a positive of class
    /// `r`, indexed `0..=K` with index 0 the background. Assumes unclustered
    /// scenes (`theme_size` unset).
    pub fn pair_class_marginal(&self) -> Vec<f64> {
        let n = self.objects_per_image as f64;
        let all_pairs = n * (n - 1.0);
        let pos = self.pairs_per_image as f64 / all_pairs;
        let mut out = Vec::with_capacity(self.num_classes + 1);
        out.push(1.0 - pos);
        out.extend(self.prior().into_iter().map(|p| pos * p));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::InvalidConfig(format!("num_classes = {k}, need at least 2")));
        }
        if self.feature_dim < 1 {
            return Err(Error::InvalidConfig("feature_dim must be >= 1".into()));
        }
        let prior = self.prior();
        if prior.len() != k {
            return Err(Error::InvalidConfig(format!(
                "class_prior has {} entries, expected {k}",
                prior.len()
            )));
        }
        if prior.iter().any(|p| p.is_nan() || *p < 0.0) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("class_prior must be a probability vector".into()));
        }
        validate_frequencies(&self.c_true(), k)?;
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be positive".into()));
        }
        let mut centers = self.centers()?;
        if centers.len() != k {
            return Err(Error::InvalidConfig(format!(
                "{} region centers for {k} classes",
                centers.len()
            )));
        }
        centers.push(self.background());
        if centers.iter().any(|c| c.len() != self.feature_dim) {
            return Err(Error::InvalidConfig("region center dimension != feature_dim".into()));
        }
        let min_dist = MIN_SEPARATION_SIGMAS * self.noise_sigma;
        for i in 0..centers.len() {
            for j in (i + 1)..centers.len() {
                let d = euclidean(&centers[i], &centers[j]);
                if d < min_dist {
                    return Err(Error::InvalidConfig(format!(
                        "regions {i} and {j} overlap: center distance {d} < {min_dist} \
                         ({MIN_SEPARATION_SIGMAS} sigma)"
                    )));
                }
            }
        }
        if self.num_images == 0 {
            return Err(Error::InvalidConfig("num_images must be positive".into()));
        }
        if self.objects_per_image < 2 {
            return Err(Error::InvalidConfig("objects_per_image must be >= 2".into()));
        }
        let max_pairs = self.objects_per_image * (self.objects_per_image - 1);
        if self.pairs_per_image == 0 || self.pairs_per_image > max_pairs {
            return Err(Error::InvalidConfig(format!(
                "pairs_per_image must be in 1..={max_pairs}"
            )));
        }
        if let Some(m) = self.theme_size {
            if m == 0 || m > k {
                return Err(Error::InvalidConfig(format!("theme_size must be in 1..={k}")));
            }
            if prior.iter().filter(|p| **p > 0.0).count() < m {
                return Err(Error::InvalidConfig(
                    "theme_size exceeds the number of classes with prior mass".into(),
                ));
            }
        }
        if self.num_object_classes == 0 {
            return Err(Error::InvalidConfig("num_object_classes must be positive".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig("iou_threshold must be in (0, 1]".into()));
        }
        self.detection.validate()
    }
}

pub(crate) fn validate_frequencies(c: &[f64], k: usize) -> Result<()> {
    if c.len() != k {
        return Err(Error::InvalidConfig(format!(
            "label frequencies have {} entries, expected {k}",
            c.len()
        )));
    }
    if let Some((r, v)) = c.iter().enumerate().find(|(_, v)| !(**v > 0.0 && **v <= 1.0)) {
        return Err(Error::InvalidConfig(format!(
            "label frequency of class {} is {v}, must be in (0, 1]",
            r + 1
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub examples: Vec<RelationExample>,
    pub c_true: Vec<f64>,
}

impl Corpus {
    /// Examples of one image keyed by pair.
    pub fn index(&self) -> HashMap<(u64, PairKey), usize> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.image_id, e.pair), i))
            .collect()
    }
}

fn quantize(v: f64) -> f64 {
    (v * BOX_GRID).round() / BOX_GRID
}

fn sample_box(rng: &mut impl Rng) -> BBox {
    let cx: f64 = rng.random_range(0.15..0.85);
    let cy: f64 = rng.random_range(0.15..0.85);
    let w: f64 = rng.random_range(0.1..0.3);
    let h: f64 = rng.random_range(0.1..0.3);
    BBox {
        x1: quantize((cx - w / 2.0).max(0.0)),
        y1: quantize((cy - h / 2.0).max(0.0)),
        x2: quantize((cx + w / 2.0).min(1.0)),
        y2: quantize((cy + h / 2.0).min(1.0)),
    }
}

pub(crate) fn sample_feature(center: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    center.iter().map(|c| c + normal.sample(rng)).collect()
}

/// Generates scenes and one example per ordered object pair, with `y` set and
/// `s = 0`. Labels are assigned separately by [`scar_delete`].
pub fn generate_corpus(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let centers = cfg.centers()?;
    let background = cfg.background();
    let prior = WeightedIndex::new(cfg.prior())
        .map_err(|e| Error::InvalidConfig(format!("class_prior: {e}")))?;
    let n = cfg.objects_per_image;

    let mut scenes = Vec::with_capacity(cfg.num_images);
    let mut examples = Vec::with_capacity(cfg.num_images * n * (n - 1));
    for image in 0..cfg.num_images as u64 {
        let mut rng = rng::stream(cfg.rng_seed, "scene", &[image]);
        let objects: Vec<SceneObject> = (0..n)
            .map(|_| SceneObject {
                bbox: sample_box(&mut rng),
                class: rng.random_range(0..cfg.num_object_classes),
            })
            .collect();

        let mut relations = match cfg.theme_size {
            None => {
                let mut all_pairs: Vec<PairKey> = (0..n)
                    .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| PairKey::new(i, j)))
                    .collect();
                for i in 0..cfg.pairs_per_image {
                    let j = rng.random_range(i..all_pairs.len());
                    all_pairs.swap(i, j);
                }
                all_pairs[..cfg.pairs_per_image]
                    .iter()
                    .map(|p| GtRelation {
                        subject: p.subject,
                        object: p.object,
                        predicate: prior.sample(&mut rng) + 1,
                    })
                    .collect::<Vec<_>>()
            }
            Some(m) => themed_relations(cfg, &prior, m, &mut rng),
        };
        relations.sort_by_key(|r| (r.subject, r.object));

        let scene = Scene {
            image_id: image,
            objects,
            relations,
        };
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let y = scene.predicate_of(i, j).unwrap_or(0);
                let center = if y == 0 { &background } else { &centers[y - 1] };
                examples.push(RelationExample {
                    image_id: image,
                    pair: PairKey::new(i, j),
                    x: sample_feature(center, cfg.noise_sigma, &mut rng),
                    s: 0,
                    y,
                });
            }
        }
        scenes.push(scene);
    }
    Ok(Corpus {
        scenes,
        examples,
        c_true: cfg.c_true(),
    })
}

fn themed_relations<R: Rng>(
    cfg: &GenConfig,
    prior: &WeightedIndex<f64>,
    theme_size: usize,
    rng: &mut R,
) -> Vec<GtRelation> {
    let n = cfg.objects_per_image;
    let mut theme: Vec<usize> = Vec::with_capacity(theme_size);
    while theme.len() < theme_size {
        let r = prior.sample(rng) + 1;
        if !theme.contains(&r) {
            theme.push(r);
        }
    }
    let hubs: Vec<usize> = theme.iter().map(|_| rng.random_range(0..n)).collect();
    let mut used = vec![false; n * n];
    for i in 0..n {
        used[i * n + i] = true;
    }
    let mut relations = Vec::with_capacity(cfg.pairs_per_image);
    while relations.len() < cfg.pairs_per_image {
        let t = rng.random_range(0..theme_size);
        let hub = hubs[t];
        let free: Vec<usize> = (0..n).filter(|&o| !used[hub * n + o]).collect();
        // A saturated hub spills over to any unused pair.
        let (subject, object) = if free.is_empty() {
            let open: Vec<usize> = (0..n * n).filter(|&i| !used[i]).collect();
            let i = open[rng.random_range(0..open.len())];
            (i / n, i % n)
        } else {
            (hub, free[rng.random_range(0..free.len())])
        };
        used[subject * n + object] = true;
        relations.push(GtRelation {
            subject,
            object,
            predicate: theme[t],
        });
    }
    relations
}

/// Assigns observed labels under SCAR: a class-`r` positive keeps its label
/// with probability `c_true[r]`, independently of its features.
pub fn scar_delete(
    mut examples: Vec<RelationExample>,
    c_true: &[f64],
    seed: u64,
) -> Result<Vec<RelationExample>> {
    validate_frequencies(c_true, c_true.len())?;
    for e in &mut examples {
        e.s = 0;
        if e.y == 0 {
            continue;
        }
        let c = *c_true.get(e.y - 1).ok_or_else(|| {
            Error::InvalidInput(format!("example class {} exceeds K = {}", e.y, c_true.len()))
        })?;
        let mut rng = rng::stream(
            seed,
            "scar",
            &[e.image_id, e.pair.subject as u64, e.pair.object as u64],
        );
        if rng.random::<f64>() < c {
            e.s = e.y;
        }
    }
    Ok(examples)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
}

/// Noisy detector applied to ground-truth scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub noise: DetectionNoise,
    pub iou_threshold: f64,
    pub num_object_classes: usize,
}

impl Detector {
    pub fn from_config(cfg: &GenConfig, noise: DetectionNoise) -> Self {
        Self {
            noise,
            iou_threshold: cfg.iou_threshold,
            num_object_classes: cfg.num_object_classes,
        }
    }
}

/// One detector pass over a scene.
///
/// `matching[d]` is the ground-truth object that detection `d` matches by
/// IoU and class; `box_matching[d]` ignores the class. Boxes are in the
/// (possibly mirrored) coordinates of the realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRealization {
    pub image_id: u64,
    pub flipped: bool,
    pub detections: Vec<Detection>,
    pub matching: Vec<Option<usize>>,
    pub box_matching: Vec<Option<usize>>,
}

/// Greedy one-to-one matching by descending IoU.
fn greedy_match(
    gt: &[SceneObject],
    detections: &[Detection],
    threshold: f64,
    require_class: bool,
) -> Vec<Option<usize>> {
    let mut candidates = Vec::new();
    for (d, det) in detections.iter().enumerate() {
        for (g, obj) in gt.iter().enumerate() {
            if require_class && det.class != obj.class {
                continue;
            }
            let iou = det.bbox.iou(&obj.bbox);
            if iou >= threshold {
                candidates.push((iou, d, g));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; detections.len()];
    let mut taken = vec![false; gt.len()];
    for (_, d, g) in candidates {
        if out[d].is_none() && !taken[g] {
            out[d] = Some(g);
            taken[g] = true;
        }
    }
    out
}

/// Runs the noisy detector over `scene`. The noise draw depends on
/// `(seed, image_id, flipped)`, so a new seed or flip state gives an
/// independent realization.
pub fn simulate_detection(
    scene: &Scene,
    flipped: bool,
    detector: &Detector,
    seed: u64,
) -> DetectionRealization {
    let noise = &detector.noise;
    let mut rng = rng::stream(seed, "detect", &[scene.image_id, flipped as u64]);
    let jitter = Normal::new(0.0, noise.box_jitter_sigma.max(0.0)).expect("sigma >= 0");
    let gt: Vec<SceneObject> = scene
        .objects
        .iter()
        .map(|o| SceneObject {
            bbox: if flipped { o.bbox.flipped() } else { o.bbox },
            class: o.class,
        })
        .collect();

    let mut detections = Vec::with_capacity(gt.len());
    for obj in &gt {
        // Fixed number of draws per object keeps streams aligned across noise levels.
        let missed = rng.random::<f64>() < noise.miss_prob;
        let deltas: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut rng));
        let relabel = rng.random::<f64>() < noise.label_error_prob;
        let new_class = rng.random_range(0..detector.num_object_classes.max(1));
        if missed {
            continue;
        }
        let bbox = if noise.box_jitter_sigma > 0.0 {
            let xs = [
                (obj.bbox.x1 + deltas[0]).clamp(0.0, 1.0),
                (obj.bbox.x2 + deltas[2]).clamp(0.0, 1.0),
            ];
            let ys = [
                (obj.bbox.y1 + deltas[1]).clamp(0.0, 1.0),
                (obj.bbox.y2 + deltas[3]).clamp(0.0, 1.0),
            ];
            BBox::new(
                xs[0].min(xs[1]),
                ys[0].min(ys[1]),
                xs[0].max(xs[1]),
                ys[0].max(ys[1]),
            )
        } else {
            obj.bbox
        };
        detections.push(Detection {
            bbox,
            class: if relabel { new_class } else { obj.class },
        });
    }
    let matching = greedy_match(&gt, &detections, detector.iou_threshold, true);
    let box_matching = greedy_match(&gt, &detections, detector.iou_threshold, false);
    DetectionRealization {
        image_id: scene.image_id,
        flipped,
        detections,
        matching,
        box_matching,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValidPair {
    /// Pair of detection indices.
    pub pair: PairKey,
    /// Ground-truth object pair it maps onto.
    pub gt_pair: PairKey,
    /// Ground-truth predicate of the mapped pair, 0 when there is none.
    pub y: usize,
}

/// Ordered detection pairs whose endpoints both match ground-truth objects
/// (box and class). Several detection pairs may map onto the same
/// ground-truth pair.
pub fn valid_pairs(realization: &DetectionRealization, scene: &Scene) -> Vec<ValidPair> {
    let n = realization.detections.len();
    let mut out = Vec::new();
    for a in 0..n {
        let Some(ga) = realization.matching[a] else {
            continue;
        };
        for b in 0..n {
            if a == b {
                continue;
            }
            let Some(gb) = realization.matching[b] else {
                continue;
            };
            if ga == gb {
                continue;
            }
            out.push(ValidPair {
                pair: PairKey::new(a, b),
                gt_pair: PairKey::new(ga, gb),
                y: scene.predicate_of(ga, gb).unwrap_or(0),
            });
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: GenConfig,
    pub c_true: Vec<f64>,
    pub num_scenes: usize,
    pub num_examples: usize,
    pub examples_sha256: String,
    pub scenes_sha256: String,
}

pub const EXAMPLES_FILE: &str = "examples.ndjson";
pub const SCENES_FILE: &str = "scenes.ndjson";
pub const MANIFEST_FILE: &str = "corpus.manifest.json";

fn to_ndjson<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialized examples, one JSON object per line. Floats use shortest
/// round-trip formatting, so reading back is exact.
pub fn examples_ndjson(examples: &[RelationExample]) -> Result<Vec<u8>> {
    to_ndjson(examples)
}

pub fn write_corpus(dir: &Path, cfg: &GenConfig, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let examples = to_ndjson(&corpus.examples)?;
    let scenes = to_ndjson(&corpus.scenes)?;
    let manifest = CorpusManifest {
        config: cfg.clone(),
        c_true: corpus.c_true.clone(),
        num_scenes: corpus.scenes.len(),
        num_examples: corpus.examples.len(),
        examples_sha256: sha256_hex(&examples),
        scenes_sha256: sha256_hex(&scenes),
    };
    write_atomic(&dir.join(EXAMPLES_FILE), &examples)?;
    write_atomic(&dir.join(SCENES_FILE), &scenes)?;
    let mut m = serde_json::to_vec_pretty(&manifest)?;
    m.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &m)
}

fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Vec<T>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = sha256_hex(&bytes);
    let mut out = Vec::new();
    for line in BufReader::new(bytes.as_slice()).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok((out, digest))
}

pub fn read_corpus(dir: &Path) -> Result<(GenConfig, Corpus)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CorpusManifest = serde_json::from_slice(&bytes)?;
    let (examples, ex_digest) = read_ndjson::<RelationExample>(&dir.join(EXAMPLES_FILE))?;
    let (scenes, sc_digest) = read_ndjson::<Scene>(&dir.join(SCENES_FILE))?;
    for (path, got, want) in [
        (EXAMPLES_FILE, &ex_digest, &manifest.examples_sha256),
        (SCENES_FILE, &sc_digest, &manifest.scenes_sha256),
    ] {
        if got != want {
            return Err(Error::Integrity {
                path: dir.join(path),
                reason: format!("checksum {got} != manifest {want}"),
            });
        }
    }
    Ok((
        manifest.config,
        Corpus {
            scenes,
            examples,
            c_true: manifest.c_true,
        },
    ))
}
