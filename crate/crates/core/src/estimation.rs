//! Label-frequency estimators.
//!
//! Both estimators average the biased probability `p̃(s = r | x)` over
//! labeled, valid examples of class `r`. Train-Est does it once with a
//! trained model; DLFE keeps a per-class exponential moving average of the
//! in-batch means while the model trains, so every augmented epoch adds
//! fresh valid examples.

use serde::{Deserialize, Serialize};

use crate::classifier::{BatchView, ProbabilityVector};
use crate::error::{Error, Result};

/// Lower clamp on estimates; recovery divides by them.
pub const FREQUENCY_FLOOR: f64 = 1e-4;

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Label frequencies `c_r` for classes `1..=K`, stored at index `r - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelFrequencies(Vec<f64>);

impl LabelFrequencies {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        crate::synth::validate_frequencies(&c, c.len())?;
        Ok(Self(c))
    }

    pub fn uniform(k: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `c_r` for class `r` in `1..=K`.
    pub fn of(&self, class: usize) -> f64 {
        self.0[class - 1]
    }
}

/// Estimates plus the classes that had nothing to estimate from.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub frequencies: LabelFrequencies,
    /// 1-based classes filled in by the median remedy.
    pub missing: Vec<usize>,
    /// Valid labeled examples that contributed, per class.
    pub valid_counts: Vec<u64>,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Clamps available estimates to `[FREQUENCY_FLOOR, 1]` and fills the rest
/// with the median of the available ones.
pub fn finalize_estimates(raw: &[Option<f64>], valid_counts: Vec<u64>) -> Result<Estimate> {
    let clamped: Vec<Option<f64>> = raw
        .iter()
        .map(|v| v.map(|c| c.clamp(FREQUENCY_FLOOR, 1.0)))
        .collect();
    let mut present: Vec<f64> = clamped.iter().flatten().copied().collect();
    let fill = median(&mut present).ok_or(Error::NoEstimates)?;
    let missing: Vec<usize> = clamped
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(r, _)| r + 1)
        .collect();
    let c = clamped.into_iter().map(|v| v.unwrap_or(fill)).collect();
    Ok(Estimate {
        frequencies: LabelFrequencies::new(c)?,
        missing,
        valid_counts,
    })
}

/// Train-Est: `ĉ_r = mean of p̃(s = r | x)` over the valid labeled examples
/// of class `r`.
///
/// `examples` yields `(r, x)` with `r` in `1..=K`; only valid examples should
/// be passed. Classes with no example get the median of the others.
pub fn train_est<'a, F, I>(predict_fn: F, examples: I, num_classes: usize) -> Result<Estimate>
where
    F: Fn(&[f64]) -> Result<ProbabilityVector>,
    I: IntoIterator<Item = (usize, &'a [f64])>,
{
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0u64; num_classes];
    for (class, x) in examples {
        if class == 0 || class > num_classes {
            return Err(Error::InvalidInput(format!(
                "Train-Est example has class {class}, expected 1..={num_classes}"
            )));
        }
        let p = predict_fn(x)?;
        sums[class - 1] += p.get(class);
        counts[class - 1] += 1;
    }
    let raw: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    finalize_estimates(&raw, counts)
}

/// Running state of dynamic label-frequency estimation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    c_tilde: Vec<f64>,
    alpha: f64,
    updates_seen: Vec<u64>,
    valid_seen: Vec<u64>,
}

impl EstimatorState {
    /// Value held by a class before its first update.
    pub const INITIAL_ESTIMATE: f64 = 0.5;

    pub fn new(num_classes: usize, alpha: f64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidConfig("DLFE needs at least one class".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!("momentum alpha = {alpha} must be in (0, 1]")));
        }
        Ok(Self {
            c_tilde: vec![Self::INITIAL_ESTIMATE; num_classes],
            alpha,
            updates_seen: vec![0; num_classes],
            valid_seen: vec![0; num_classes],
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn c_tilde(&self) -> &[f64] {
        &self.c_tilde
    }

    pub fn updates_seen(&self) -> &[u64] {
        &self.updates_seen
    }

    pub fn valid_seen(&self) -> &[u64] {
        &self.valid_seen
    }

    /// Folds one batch of `(class, p̃(s = class | x))` pairs, taken from the
    /// batch's valid labeled examples, into the moving averages.
    ///
    /// Only classes present in the batch move. A class's first update copies
    /// the in-batch mean; later ones apply
    /// `c̃ ← α·c' + (1 − α)·c̃`.
    pub fn update(&mut self, batch_valid: &[(usize, f64)]) -> Result<()> {
        let k = self.c_tilde.len();
        let mut sums = vec![0.0; k];
        let mut counts = vec![0u64; k];
        for &(class, p) in batch_valid {
            if class == 0 || class > k {
                return Err(Error::InvalidInput(format!("class {class} outside 1..={k}")));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
            }
            sums[class - 1] += p;
            counts[class - 1] += 1;
        }
        for r in 0..k {
            if counts[r] == 0 {
                continue;
            }
            let batch_mean = sums[r] / counts[r] as f64;
            self.c_tilde[r] = if self.updates_seen[r] == 0 {
                batch_mean
            } else {
                self.alpha * batch_mean + (1.0 - self.alpha) * self.c_tilde[r]
            };
            self.updates_seen[r] += 1;
            self.valid_seen[r] += counts[r];
        }
        Ok(())
    }

    /// Extracts `(s, p̃(s | x))` for the valid labeled examples of a training
    /// batch and applies [`update`](Self::update).
    pub fn observe_batch(&mut self, batch: &BatchView<'_>) -> Result<()> {
        let pairs: Vec<(usize, f64)> = batch
            .examples
            .iter()
            .zip(batch.valid)
            .zip(batch.probs)
            .filter(|((e, &valid), _)| valid && e.s != 0)
            .map(|((e, _), p)| (e.s, p.get(e.s)))
            .collect();
        self.update(&pairs)
    }

    /// Final estimates; never-updated classes get the median remedy.
    pub fn finalize(&self) -> Result<Estimate> {
        let raw: Vec<Option<f64>> = self
            .c_tilde
            .iter()
            .zip(&self.updates_seen)
            .map(|(c, &n)| (n > 0).then_some(*c))
            .collect();
        finalize_estimates(&raw, self.valid_seen.clone())
    }
}

/// On-disk form of an estimate, one per evaluation setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyFile {
    pub setting: String,
    /// DLFE momentum; absent for Train-Est.
    pub alpha: Option<f64>,
    pub c: Vec<f64>,
    pub missing: Vec<usize>,
    pub valid_counts: Vec<u64>,
    pub estimator: String,
}

impl FrequencyFile {
    pub fn from_estimate(setting: &str, estimator: &str, alpha: Option<f64>, est: &Estimate) -> Self {
        Self {
            setting: setting.to_string(),
            alpha,
            c: est.frequencies.as_slice().to_vec(),
            missing: est.missing.clone(),
            valid_counts: est.valid_counts.clone(),
            estimator: estimator.to_string(),
        }
    }

    pub fn frequencies(&self) -> Result<LabelFrequencies> {
        LabelFrequencies::new(self.c.clone())
    }
}
