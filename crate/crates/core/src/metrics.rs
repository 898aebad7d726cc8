//! Recall-family metrics over relation triples.
//!
//! Recall@K is averaged per image; mean recall@K averages per-class recall,
//! where each class's recall is pooled over the whole corpus. Classes with no
//! ground-truth triple are left out of every mean.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recovery::ScoredPrediction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

impl Triple {
    pub fn new(subject: usize, object: usize, predicate: usize) -> Self {
        Self {
            subject,
            object,
            predicate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGroundTruth {
    pub image_id: u64,
    pub triples: Vec<Triple>,
}

/// Ground-truth triples per image, deduplicated, in ground-truth object
/// indices.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSet {
    num_classes: usize,
    images: Vec<ImageGroundTruth>,
    class_counts: Vec<usize>,
}

impl GroundTruthSet {
    pub fn new(num_classes: usize, images: Vec<ImageGroundTruth>) -> Result<Self> {
        let mut class_counts = vec![0; num_classes];
        let mut out = Vec::with_capacity(images.len());
        for mut img in images {
            let mut seen = HashSet::new();
            img.triples.retain(|t| seen.insert(*t));
            for t in &img.triples {
                if t.predicate == 0 || t.predicate > num_classes {
                    return Err(Error::InvalidInput(format!(
                        "image {}: predicate {} outside 1..={num_classes}",
                        img.image_id, t.predicate
                    )));
                }
                class_counts[t.predicate - 1] += 1;
            }
            out.push(img);
        }
        Ok(Self {
            num_classes,
            images: out,
            class_counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &[ImageGroundTruth] {
        &self.images
    }

    /// Ground-truth triples per class, index `r - 1`.
    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }
}

/// Maps predicted object indices onto ground-truth objects in detection
/// settings: `image_id -> matching[detection]`.
pub type DetectionMatches = HashMap<u64, Vec<Option<usize>>>;

/// Hit flags aligned with [`GroundTruthSet::images`] and their triples.
#[derive(Clone, Debug, PartialEq)]
pub struct Hits(pub Vec<Vec<bool>>);

/// Marks every ground-truth triple retrieved by `preds`.
///
/// Predictions are consumed per image in rank order; each one hits at most
/// one unconsumed triple, so duplicates of an already-hit triple count for
/// nothing. With `detection`, predicted indices are first mapped through the
/// detection matching; pairs with an unmatched endpoint hit nothing.
pub fn match_predictions(
    preds: &[ScoredPrediction],
    gt: &GroundTruthSet,
    detection: Option<&DetectionMatches>,
) -> Hits {
    let mut by_image: HashMap<u64, Vec<&ScoredPrediction>> = HashMap::new();
    for p in preds {
        by_image.entry(p.image_id).or_default().push(p);
    }
    let hits = gt
        .images
        .iter()
        .map(|img| {
            let mut flags = vec![false; img.triples.len()];
            let Some(list) = by_image.get_mut(&img.image_id) else {
                return flags;
            };
            list.sort_by_key(|p| p.rank);
            let index: HashMap<Triple, usize> =
                img.triples.iter().enumerate().map(|(i, t)| (*t, i)).collect();
            let matching = detection.and_then(|m| m.get(&img.image_id));
            for p in list.iter() {
                let mapped = match (detection, matching) {
                    (None, _) => Some((p.subject_idx, p.object_idx)),
                    (Some(_), Some(m)) => {
                        match (m.get(p.subject_idx).copied().flatten(), m.get(p.object_idx).copied().flatten()) {
                            (Some(a), Some(b)) => Some((a, b)),
                            _ => None,
                        }
                    }
                    (Some(_), None) => None,
                };
                let Some((s, o)) = mapped else { continue };
                if let Some(&i) = index.get(&Triple::new(s, o, p.predicate)) {
                    if !flags[i] {
                        flags[i] = true;
                    }
                }
            }
            flags
        })
        .collect();
    Hits(hits)
}

/// Per-image recall, averaged over images that have ground truth.
pub fn recall_at_k(hits: &Hits, gt: &GroundTruthSet) -> Option<f64> {
    let per_image: Vec<f64> = gt
        .images
        .iter()
        .zip(&hits.0)
        .filter(|(img, _)| !img.triples.is_empty())
        .map(|(img, h)| h.iter().filter(|&&b| b).count() as f64 / img.triples.len() as f64)
        .collect();
    if per_image.is_empty() {
        None
    } else {
        Some(per_image.iter().sum::<f64>() / per_image.len() as f64)
    }
}

/// Mean of per-class recalls over classes present in the ground truth, and
/// the per-class vector (index `r - 1`, `None` for absent classes).
pub fn mean_recall_at_k(hits: &Hits, gt: &GroundTruthSet) -> (Option<f64>, Vec<Option<f64>>) {
    let mut hit_counts = vec![0usize; gt.num_classes];
    for (img, h) in gt.images.iter().zip(&hits.0) {
        for (t, &flag) in img.triples.iter().zip(h) {
            if flag {
                hit_counts[t.predicate - 1] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = hit_counts
        .iter()
        .zip(&gt.class_counts)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    (mean_present(per_class.iter().copied()), per_class)
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// How classes are split into head / middle / tail.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BucketSpec {
    Absolute { head: usize, middle: usize, tail: usize },
    Fractions { head_fraction: f64, middle_fraction: f64, tail_fraction: f64 },
}

impl Default for BucketSpec {
    fn default() -> Self {
        BucketSpec::Absolute {
            head: 15,
            middle: 20,
            tail: 15,
        }
    }
}

impl BucketSpec {
    pub const FALLBACK: BucketSpec = BucketSpec::Fractions {
        head_fraction: 0.3,
        middle_fraction: 0.4,
        tail_fraction: 0.3,
    };

    /// Bucket sizes for `k` classes. Fractions round head and tail to the
    /// nearest integer (halves away from zero); the middle takes the rest.
    /// Absolute sizes larger than `k` fall back to 0.3 / 0.4 / 0.3.
    pub fn sizes(&self, k: usize) -> Result<[usize; 3]> {
        match *self {
            BucketSpec::Absolute { head, middle, tail } => {
                let total = head + middle + tail;
                if k < total {
                    Self::FALLBACK.sizes(k)
                } else if k > total {
                    Err(Error::InvalidConfig(format!(
                        "buckets {head}/{middle}/{tail} cover {total} of {k} classes"
                    )))
                } else {
                    Ok([head, middle, tail])
                }
            }
            BucketSpec::Fractions {
                head_fraction,
                middle_fraction,
                tail_fraction,
            } => {
                let sum = head_fraction + middle_fraction + tail_fraction;
                if (sum - 1.0).abs() > 1e-9 || [head_fraction, middle_fraction, tail_fraction].iter().any(|f| *f < 0.0) {
                    return Err(Error::InvalidConfig(format!("bucket fractions sum to {sum}")));
                }
                let head = (head_fraction * k as f64).round() as usize;
                let tail = ((tail_fraction * k as f64).round() as usize).min(k - head.min(k));
                let head = head.min(k);
                Ok([head, k - head - tail, tail])
            }
        }
    }
}

/// Classes `1..=K` ordered by descending count, ties by class index.
pub fn frequency_order(counts: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (1..=counts.len()).collect();
    order.sort_by(|a, b| counts[b - 1].cmp(&counts[a - 1]).then(a.cmp(b)));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRecalls {
    pub head: Option<f64>,
    pub middle: Option<f64>,
    pub tail: Option<f64>,
    pub sizes: [usize; 3],
}

/// Unweighted mean of per-class recall within each frequency bucket.
pub fn bucket_recalls(
    per_class: &[Option<f64>],
    class_frequency_order: &[usize],
    spec: &BucketSpec,
) -> Result<BucketRecalls> {
    let k = per_class.len();
    if class_frequency_order.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: class_frequency_order.len(),
        });
    }
    let sizes = spec.sizes(k)?;
    let mut start = 0;
    let mut means = [None; 3];
    for (b, size) in sizes.iter().enumerate() {
        let classes = &class_frequency_order[start..start + size];
        means[b] = mean_present(classes.iter().map(|&r| per_class[r - 1]));
        start += size;
    }
    Ok(BucketRecalls {
        head: means[0],
        middle: means[1],
        tail: means[2],
        sizes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// One predicate per pair (graph constraint).
    Constraint,
    /// Every (pair, predicate) candidate ("ng").
    Ng,
}

impl Regime {
    pub fn graph_constraint(self) -> bool {
        matches!(self, Regime::Constraint)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Constraint => "constraint",
            Regime::Ng => "ng",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub regime: Regime,
    pub k: usize,
    pub recall: Option<f64>,
    pub mean_recall: Option<f64>,
    pub per_class_recall: Vec<Option<f64>>,
    pub buckets: BucketRecalls,
    /// Ground-truth triples in head / middle / tail.
    pub bucket_gt_counts: [usize; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<RecallEntry>,
}

impl MetricsReport {
    pub fn get(&self, regime: Regime, k: usize) -> Option<&RecallEntry> {
        self.entries.iter().find(|e| e.regime == regime && e.k == k)
    }
}

/// Evaluates ranked predictions at every `k` in `ks`.
///
/// `ranked[regime]` holds each image's predictions ranked at least up to
/// `max(ks)`; the top-`k` cut keeps `rank <= k`.
pub fn evaluate(
    ranked: &BTreeMap<Regime, Vec<ScoredPrediction>>,
    gt: &GroundTruthSet,
    detection: Option<&DetectionMatches>,
    ks: &[usize],
    class_frequency_order: &[usize],
    buckets: &BucketSpec,
) -> Result<MetricsReport> {
    let sizes = buckets.sizes(gt.num_classes)?;
    let mut bucket_gt_counts = [0usize; 3];
    let mut start = 0;
    for (b, size) in sizes.iter().enumerate() {
        bucket_gt_counts[b] = class_frequency_order[start..start + size]
            .iter()
            .map(|&r| gt.class_counts[r - 1])
            .sum();
        start += size;
    }
    let mut entries = Vec::new();
    for (&regime, preds) in ranked {
        for &k in ks {
            let top: Vec<ScoredPrediction> = preds.iter().filter(|p| p.rank <= k).cloned().collect();
            let hits = match_predictions(&top, gt, detection);
            let (mean_recall, per_class) = mean_recall_at_k(&hits, gt);
            entries.push(RecallEntry {
                regime,
                k,
                recall: recall_at_k(&hits, gt),
                mean_recall,
                buckets: bucket_recalls(&per_class, class_frequency_order, buckets)?,
                per_class_recall: per_class,
                bucket_gt_counts,
            });
        }
    }
    Ok(MetricsReport { entries })
}
