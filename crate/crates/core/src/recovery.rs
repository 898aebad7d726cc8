//! Unbiased score recovery and per-image ranking.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::ProbabilityVector;
use crate::error::{Error, Result};
use crate::estimation::LabelFrequencies;
use crate::synth::PairKey;

/// Foreground scores `p̃(s = r | x) / c_r` for `r` in `1..=K`, at index `r - 1`.
/// The background entry is not recovered.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredScores {
    scores: Vec<f64>,
}

impl RecoveredScores {
    /// Biased foreground probabilities, unchanged.
    pub fn biased(p: &ProbabilityVector) -> Self {
        Self {
            scores: p.as_slice()[1..].to_vec(),
        }
    }

    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidInput("scores must be finite and >= 0".into()));
        }
        Ok(Self { scores })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    /// Score of class `r` in `1..=K`.
    pub fn of(&self, class: usize) -> f64 {
        self.scores[class - 1]
    }

    /// Rescales to sum 1 (ablation only; ranking uses raw scores by default).
    pub fn renormalized(&self) -> Self {
        let total: f64 = self.scores.iter().sum();
        if total <= 0.0 {
            return self.clone();
        }
        Self {
            scores: self.scores.iter().map(|s| s / total).collect(),
        }
    }
}

/// Divides each foreground probability by its class's label frequency.
pub fn recover(p_biased: &ProbabilityVector, c: &LabelFrequencies) -> Result<RecoveredScores> {
    let k = p_biased.num_classes();
    if c.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: c.len(),
        });
    }
    if c.as_slice().iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::InvalidInput("label frequency of 0".into()));
    }
    Ok(RecoveredScores {
        scores: p_biased.as_slice()[1..]
            .iter()
            .zip(c.as_slice())
            .map(|(p, c)| p / c)
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub image_id: u64,
    pub subject_idx: usize,
    pub object_idx: usize,
    pub predicate: usize,
    pub score: f64,
    /// 1-based position within the image's ranking.
    pub rank: usize,
}

impl ScoredPrediction {
    pub fn pair(&self) -> PairKey {
        PairKey::new(self.subject_idx, self.object_idx)
    }
}

/// Ranks one image's candidates.
///
/// With `graph_constraint`, each pair contributes only its highest-scoring
/// class; otherwise every (pair, class) is a candidate. Candidates are sorted
/// by score descending, ties by (pair, class) ascending, and cut at `top_k`.
pub fn rank_predictions(
    image_id: u64,
    pairs: &[(PairKey, RecoveredScores)],
    graph_constraint: bool,
    top_k: usize,
) -> Vec<ScoredPrediction> {
    let mut candidates: Vec<(PairKey, usize, f64)> = Vec::new();
    for (pair, scores) in pairs {
        if graph_constraint {
            // First maximum wins, so the lower class index breaks ties.
            let best = scores
                .as_slice()
                .iter()
                .enumerate()
                .fold(None::<(usize, f64)>, |acc, (i, &s)| match acc {
                    Some((_, b)) if b >= s => acc,
                    _ => Some((i, s)),
                });
            if let Some((i, s)) = best {
                candidates.push((*pair, i + 1, s));
            }
        } else {
            candidates.extend(
                scores
                    .as_slice()
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| (*pair, i + 1, s)),
            );
        }
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    candidates.truncate(top_k);
    candidates
        .into_iter()
        .enumerate()
        .map(|(i, (pair, predicate, score))| ScoredPrediction {
            image_id,
            subject_idx: pair.subject,
            object_idx: pair.object,
            predicate,
            score,
            rank: i + 1,
        })
        .collect()
}

/// Writes predictions as CSV with header
/// `image_id,subject_idx,object_idx,predicate,score,rank`.
pub fn write_predictions_csv<W: Write>(writer: W, preds: &[ScoredPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in preds {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}

pub fn read_predictions_csv<R: std::io::Read>(reader: R) -> Result<Vec<ScoredPrediction>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
