//! Evaluation-setting views of a corpus.
//!
//! * `predcls`: ground-truth boxes and object labels, every pair valid.
//! * `sgcls`: ground-truth boxes, object labels resampled with
//!   `label_error_prob`.
//! * `sgdet`: the full noisy detector (misses, box jitter, label errors).
//!
//! Each view turns a detector realization into relation examples over
//! ordered detection pairs. A pair whose endpoints both overlap ground-truth
//! objects inherits that ground-truth pair's features and labels; any other
//! pair is background with fresh background-region features. A pair is
//! valid when both endpoints also match the object labels.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{EpochSource, ImageExamples};
use crate::error::{Error, Result};
use crate::metrics::{DetectionMatches, GroundTruthSet, ImageGroundTruth, Triple};
use crate::rng;
use crate::synth::{
    sample_feature, simulate_detection, DetectionNoise, DetectionRealization, Detector, GenConfig,
    PairKey, RelationExample, Scene,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    PredCls,
    SgCls,
    SgDet,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::PredCls, Setting::SgCls, Setting::SgDet];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::PredCls => "predcls",
            Setting::SgCls => "sgcls",
            Setting::SgDet => "sgdet",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }

    /// Detector noise this setting applies on top of the scene.
    pub fn noise(self, full: &DetectionNoise) -> DetectionNoise {
        match self {
            Setting::PredCls => DetectionNoise::none(),
            Setting::SgCls => DetectionNoise {
                label_error_prob: full.label_error_prob,
                ..DetectionNoise::none()
            },
            Setting::SgDet => *full,
        }
    }

    /// Whether predicted object indices need mapping onto ground truth.
    pub fn detection_mode(self) -> bool {
        !matches!(self, Setting::PredCls)
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predcls" => Ok(Setting::PredCls),
            "sgcls" => Ok(Setting::SgCls),
            "sgdet" => Ok(Setting::SgDet),
            other => Err(Error::InvalidConfig(format!("unknown setting {other:?}"))),
        }
    }
}

/// Which labels count as evaluation ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalLabels {
    /// Annotated triples only (`s != 0`), as in a partially labeled test set.
    #[default]
    Observed,
    /// Every true relation (`y != 0`).
    Complete,
}

const TAG_TRAIN_EST: u64 = u64::MAX;
const TAG_EVAL: u64 = u64::MAX - 1;

/// Corpus view under one setting.
pub struct SettingView<'a> {
    setting: Setting,
    scenes: Vec<&'a Scene>,
    examples: HashMap<(u64, PairKey), &'a RelationExample>,
    detector: Detector,
    background: Vec<f64>,
    noise_sigma: f64,
    flip_prob: f64,
    seed: u64,
}

impl<'a> SettingView<'a> {
    /// `scenes` are the images this view covers (e.g. the training split);
    /// `examples` must include every pair of those scenes, labels assigned.
    pub fn new(
        setting: Setting,
        gen: &GenConfig,
        scenes: Vec<&'a Scene>,
        examples: &'a [RelationExample],
        flip_prob: f64,
        seed: u64,
    ) -> Self {
        let ids: std::collections::HashSet<u64> = scenes.iter().map(|s| s.image_id).collect();
        let examples = examples
            .iter()
            .filter(|e| ids.contains(&e.image_id))
            .map(|e| ((e.image_id, e.pair), e))
            .collect();
        Self {
            setting,
            scenes,
            examples,
            detector: Detector::from_config(gen, setting.noise(&gen.detection)),
            background: gen.background(),
            noise_sigma: gen.noise_sigma,
            flip_prob,
            seed,
        }
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn scenes(&self) -> &[&'a Scene] {
        &self.scenes
    }

    fn realize(&self, scene: &Scene, tag: u64, flipped: bool) -> DetectionRealization {
        let seed = rng::derive_seed(self.seed, "detector", &[self.setting.index(), tag]);
        simulate_detection(scene, flipped, &self.detector, seed)
    }

    /// Relation examples over the ordered detection pairs of `realization`.
    pub fn pair_examples(
        &self,
        scene: &Scene,
        realization: &DetectionRealization,
        tag: u64,
    ) -> Result<ImageExamples> {
        let n = realization.detections.len();
        let mut examples = Vec::with_capacity(n * n.saturating_sub(1));
        let mut valid = Vec::with_capacity(examples.capacity());
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let pair = PairKey::new(a, b);
                let boxes = (realization.box_matching[a], realization.box_matching[b]);
                match boxes {
                    (Some(ga), Some(gb)) if ga != gb => {
                        let base = self
                            .examples
                            .get(&(scene.image_id, PairKey::new(ga, gb)))
                            .ok_or_else(|| {
                                Error::InvalidInput(format!(
                                    "image {} has no example for pair ({ga}, {gb})",
                                    scene.image_id
                                ))
                            })?;
                        let labels_match = realization.matching[a] == Some(ga)
                            && realization.matching[b] == Some(gb);
                        examples.push(RelationExample {
                            image_id: scene.image_id,
                            pair,
                            x: base.x.clone(),
                            s: base.s,
                            y: base.y,
                        });
                        valid.push(labels_match);
                    }
                    _ => {
                        let mut rng = rng::stream(
                            self.seed,
                            "background-pair",
                            &[self.setting.index(), tag, scene.image_id, a as u64, b as u64],
                        );
                        examples.push(RelationExample {
                            image_id: scene.image_id,
                            pair,
                            x: sample_feature(&self.background, self.noise_sigma, &mut rng),
                            s: 0,
                            y: 0,
                        });
                        valid.push(false);
                    }
                }
            }
        }
        Ok(ImageExamples {
            image_id: scene.image_id,
            examples,
            valid,
        })
    }

    /// Labeled, valid examples from one unflipped pass over the scenes at
    /// `indices`, as `(class, x)`: the input of Train-Est.
    pub fn train_est_examples(&self, indices: &[usize]) -> Result<Vec<(usize, Vec<f64>)>> {
        let mut out = Vec::new();
        for &i in indices {
            let scene = self.scenes.get(i).ok_or_else(|| {
                Error::InvalidInput(format!("scene index {i} out of range"))
            })?;
            let r = self.realize(scene, TAG_TRAIN_EST, false);
            let img = self.pair_examples(scene, &r, TAG_TRAIN_EST)?;
            for (e, v) in img.examples.into_iter().zip(img.valid) {
                if v && e.s != 0 {
                    out.push((e.s, e.x));
                }
            }
        }
        Ok(out)
    }

    /// Test-time view: one unflipped realization per scene.
    pub fn eval_view(&self, labels: EvalLabels) -> Result<EvalView> {
        let mut images = Vec::with_capacity(self.scenes.len());
        let mut matches = DetectionMatches::new();
        let mut gt_images = Vec::with_capacity(self.scenes.len());
        let mut num_classes = 0;
        for scene in &self.scenes {
            let r = self.realize(scene, TAG_EVAL, false);
            images.push(self.pair_examples(scene, &r, TAG_EVAL)?);
            matches.insert(scene.image_id, r.matching.clone());
            let mut triples = Vec::new();
            for rel in &scene.relations {
                let e = self
                    .examples
                    .get(&(scene.image_id, PairKey::new(rel.subject, rel.object)))
                    .ok_or_else(|| Error::InvalidInput("relation without example".into()))?;
                num_classes = num_classes.max(e.y);
                let keep = match labels {
                    EvalLabels::Observed => e.s != 0,
                    EvalLabels::Complete => e.y != 0,
                };
                if keep {
                    triples.push(Triple::new(rel.subject, rel.object, e.y));
                }
            }
            gt_images.push(ImageGroundTruth {
                image_id: scene.image_id,
                triples,
            });
        }
        Ok(EvalView {
            images,
            matches: self.setting.detection_mode().then_some(matches),
            gt_images,
        })
    }
}

impl EpochSource for SettingView<'_> {
    fn num_images(&self) -> usize {
        self.scenes.len()
    }

    /// Fresh augmentation per epoch: random flip, then a new detector draw.
    fn image(&self, epoch: usize, index: usize) -> Result<ImageExamples> {
        let scene = self.scenes[index];
        let flipped = rng::stream(self.seed, "flip", &[epoch as u64, scene.image_id])
            .random::<f64>()
            < self.flip_prob;
        let r = self.realize(scene, epoch as u64, flipped);
        self.pair_examples(scene, &r, epoch as u64)
    }
}

/// Everything needed to score and evaluate the test images of one setting.
pub struct EvalView {
    pub images: Vec<ImageExamples>,
    /// Detection-to-ground-truth matching; `None` in `predcls`.
    pub matches: Option<DetectionMatches>,
    gt_images: Vec<ImageGroundTruth>,
}

impl EvalView {
    pub fn ground_truth(&self, num_classes: usize) -> Result<GroundTruthSet> {
        GroundTruthSet::new(num_classes, self.gt_images.clone())
    }
}
