//! Micro-corpora and a brute-force recall enumerator shared by the metric
//! tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use dlfe::metrics::{DetectionMatches, GroundTruthSet, ImageGroundTruth, Regime, Triple};
use dlfe::recovery::{rank_predictions, RecoveredScores, ScoredPrediction};
use dlfe::synth::PairKey;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct MicroImage {
    pub image_id: u64,
    pub triples: Vec<Triple>,
    /// Scores over the predicted pairs, which index detections when
    /// `matching` is set and ground-truth objects otherwise.
    pub scores: Vec<(PairKey, Vec<f64>)>,
    pub matching: Option<Vec<Option<usize>>>,
}

pub struct MicroCorpus {
    pub k: usize,
    pub images: Vec<MicroImage>,
}

impl MicroCorpus {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=4);
        let detection = rng.random_bool(0.5);
        let n_images = rng.random_range(1..=4);
        let images = (0..n_images)
            .map(|i| {
                let n_obj = rng.random_range(1..=4usize);
                let mut triples = Vec::new();
                for s in 0..n_obj {
                    for o in 0..n_obj {
                        for p in 1..=k {
                            if s != o && rng.random_bool(0.25) {
                                triples.push(Triple::new(s, o, p));
                            }
                        }
                    }
                }
                let (n_pred, matching) = if detection {
                    let n_det = rng.random_range(1..=4usize);
                    let mut targets: Vec<Option<usize>> = (0..n_obj).map(Some).collect();
                    targets.extend(std::iter::repeat_n(None, n_det));
                    targets.shuffle(&mut rng);
                    (n_det, Some(targets[..n_det].to_vec()))
                } else {
                    (n_obj, None)
                };
                let mut scores = Vec::new();
                for s in 0..n_pred {
                    for o in 0..n_pred {
                        if s != o {
                            scores.push((PairKey::new(s, o), (0..k).map(|_| rng.random::<f64>()).collect()));
                        }
                    }
                }
                MicroImage {
                    image_id: 10 + i as u64,
                    triples,
                    scores,
                    matching,
                }
            })
            .collect();
        Self { k, images }
    }

    pub fn ground_truth(&self) -> GroundTruthSet {
        GroundTruthSet::new(
            self.k,
            self.images
                .iter()
                .map(|img| ImageGroundTruth {
                    image_id: img.image_id,
                    triples: img.triples.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    pub fn detection(&self) -> Option<DetectionMatches> {
        let m: DetectionMatches = self
            .images
            .iter()
            .filter_map(|img| img.matching.clone().map(|m| (img.image_id, m)))
            .collect();
        (!m.is_empty()).then_some(m)
    }

    pub fn ranked(&self, regime: Regime, top_k: usize) -> Vec<ScoredPrediction> {
        self.images
            .iter()
            .flat_map(|img| {
                let pairs: Vec<(PairKey, RecoveredScores)> = img
                    .scores
                    .iter()
                    .map(|(p, s)| (*p, RecoveredScores::from_scores(s.clone()).unwrap()))
                    .collect();
                rank_predictions(img.image_id, &pairs, regime.graph_constraint(), top_k)
            })
            .collect()
    }
}

/// Reference metrics computed straight from the definitions.
#[derive(Debug, PartialEq)]
pub struct Reference {
    pub recall: Option<f64>,
    pub mean_recall: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub buckets: [Option<f64>; 3],
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// A triple is retrieved when some candidate among the `top_k` best-scoring
/// ones of its image maps onto its pair with its predicate.
pub fn brute_force(corpus: &MicroCorpus, regime: Regime, top_k: usize) -> Reference {
    let k = corpus.k;
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    let mut per_image = Vec::new();
    for img in &corpus.images {
        let mut candidates: Vec<(PairKey, usize, f64)> = Vec::new();
        for (pair, scores) in &img.scores {
            let classes: Vec<usize> = match regime {
                Regime::Ng => (1..=k).collect(),
                Regime::Constraint => {
                    let best = (0..k).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
                    vec![best + 1]
                }
            };
            candidates.extend(classes.into_iter().map(|c| (*pair, c, scores[c - 1])));
        }
        let retrieved: Vec<(usize, usize, usize)> = candidates
            .iter()
            .filter(|(_, _, s)| candidates.iter().filter(|(_, _, t)| t > s).count() < top_k)
            .filter_map(|(pair, c, _)| {
                let (a, b) = match &img.matching {
                    None => (Some(pair.subject), Some(pair.object)),
                    Some(m) => (m[pair.subject], m[pair.object]),
                };
                Some((a?, b?, *c))
            })
            .collect();
        let mut unique = img.triples.clone();
        unique.sort();
        unique.dedup();
        let mut image_hits = 0;
        for t in &unique {
            totals[t.predicate - 1] += 1;
            if retrieved.contains(&(t.subject, t.object, t.predicate)) {
                hits[t.predicate - 1] += 1;
                image_hits += 1;
            }
        }
        if !unique.is_empty() {
            per_image.push(image_hits as f64 / unique.len() as f64);
        }
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|r| (totals[r] > 0).then(|| hits[r] as f64 / totals[r] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();

    let mut order: Vec<usize> = (1..=k).collect();
    order.sort_by(|a, b| totals[b - 1].cmp(&totals[a - 1]).then(a.cmp(b)));
    let head = (0.3 * k as f64).round() as usize;
    let tail = ((0.3 * k as f64).round() as usize).min(k - head);
    let bounds = [(0, head), (head, k - tail), (k - tail, k)];
    let buckets = bounds.map(|(lo, hi)| {
        let v: Vec<f64> = order[lo..hi].iter().filter_map(|&r| per_class[r - 1]).collect();
        mean(&v)
    });
    Reference {
        recall: mean(&per_image),
        mean_recall: mean(&present),
        per_class,
        buckets,
    }
}

/// Frequency order of the micro-corpus classes, as the library defines it.
pub fn class_order(corpus: &MicroCorpus) -> Vec<usize> {
    dlfe::metrics::frequency_order(corpus.ground_truth().class_counts())
}

/// Ranked predictions for both regimes, cut at `top_k`.
pub fn ranked_both(corpus: &MicroCorpus, top_k: usize) -> BTreeMap<Regime, Vec<ScoredPrediction>> {
    [Regime::Constraint, Regime::Ng]
        .into_iter()
        .map(|r| (r, corpus.ranked(r, top_k)))
        .collect()
}

/// Checks every recall-family number of the library against the enumerator.
/// Returns a description of the first disagreement.
pub fn compare_with_reference(corpus: &MicroCorpus, ks: &[usize]) -> Result<(), String> {
    let gt = corpus.ground_truth();
    let detection = corpus.detection();
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let report = dlfe::metrics::evaluate(
        &ranked_both(corpus, max_k),
        &gt,
        detection.as_ref(),
        ks,
        &class_order(corpus),
        &dlfe::metrics::BucketSpec::FALLBACK,
    )
    .map_err(|e| e.to_string())?;
    for regime in [Regime::Constraint, Regime::Ng] {
        for &k in ks {
            let e = report.get(regime, k).ok_or("missing report entry")?;
            let want = brute_force(corpus, regime, k);
            let got = Reference {
                recall: e.recall,
                mean_recall: e.mean_recall,
                per_class: e.per_class_recall.clone(),
                buckets: [e.buckets.head, e.buckets.middle, e.buckets.tail],
            };
            if got != want {
                return Err(format!("{} K={k}: library {got:?}, enumerator {want:?}", regime.as_str()));
            }
        }
    }
    Ok(())
}
