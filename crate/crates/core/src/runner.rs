//! Config-driven experiments.
//!
//! One root seed drives everything through named streams: the corpus, the
//! SCAR deletion, per-setting training, and per-setting detector draws (a
//! fresh one per epoch). For each setting the biased classifier is trained
//! with the DLFE hook attached, Train-Est runs on the trained model, and every
//! requested estimator is recovered and evaluated on the held-out images.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{
    predict, train_biased, validation_split, BatchView, ClassifierParams, Optimizer, ProbabilityVector,
    TrainConfig, TrainHistory,
};
use crate::error::{Error, Result};
use crate::estimation::{train_est, Estimate, EstimatorState, FrequencyFile, LabelFrequencies};
use crate::io::{read_json, write_atomic, write_json_atomic};
use crate::metrics::{evaluate, frequency_order, BucketSpec, GroundTruthSet, MetricsReport, Regime};
use crate::recovery::{rank_predictions, recover, RecoveredScores, ScoredPrediction};
use crate::rng;
use crate::setting::{EvalLabels, EvalView, Setting, SettingView};
use crate::synth::{generate_corpus, read_corpus, scar_delete, Corpus, GenConfig, Scene};

/// Environment variable naming the root that relative output paths resolve
/// against.
pub const OUTPUT_ROOT_ENV: &str = "DLFE_OUTPUT_ROOT";
pub const SOFTWARE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const VALID_RATIO_FILE: &str = "valid_ratio.tsv";
pub const LABEL_FREQ_FILE: &str = "label_freq.tsv";
pub const RECALL_DELTA_FILE: &str = "recall_delta.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Biased probabilities, unrecovered.
    None,
    TrainEst,
    Dlfe,
    /// Recovery with the true label frequencies.
    GroundTruthC,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::None,
        EstimatorKind::TrainEst,
        EstimatorKind::Dlfe,
        EstimatorKind::GroundTruthC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::None => "none",
            EstimatorKind::TrainEst => "train_est",
            EstimatorKind::Dlfe => "dlfe",
            EstimatorKind::GroundTruthC => "ground_truth_c",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown estimator {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed. Overrides `gen.rng_seed` and `train.rng_seed`.
    pub seed: u64,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub settings: Vec<Setting>,
    pub estimators: Vec<EstimatorKind>,
    pub metrics_k: Vec<usize>,
    pub regimes: Vec<Regime>,
    /// Relative paths resolve against `$DLFE_OUTPUT_ROOT` when it is set.
    pub output_dir: PathBuf,
    /// Share of images (the highest ids) held out for evaluation.
    pub test_fraction: f64,
    pub dlfe_alpha: f64,
    /// Probability of a horizontal flip per image per epoch.
    pub flip_prob: f64,
    pub eval_labels: EvalLabels,
    pub buckets: BucketSpec,
    /// Rescale recovered scores to sum 1 before ranking.
    pub renormalize: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gen: GenConfig {
                num_images: 1600,
                objects_per_image: 16,
                pairs_per_image: 48,
                ..GenConfig::default()
            },
            train: TrainConfig {
                optimizer: Optimizer::Adam,
                weight_decay: 1e-4,
                ..TrainConfig::default()
            },
            settings: Setting::ALL.to_vec(),
            estimators: EstimatorKind::ALL.to_vec(),
            metrics_k: vec![20, 50, 100],
            regimes: vec![Regime::Constraint, Regime::Ng],
            output_dir: PathBuf::from("runs/default"),
            test_fraction: 0.2,
            dlfe_alpha: crate::estimation::DEFAULT_ALPHA,
            flip_prob: 0.5,
            eval_labels: EvalLabels::Observed,
            buckets: BucketSpec::default(),
            renormalize: false,
        }
    }
}

fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json maps keep keys sorted, so this is canonical.
    let canonical = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(&canonical)))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.settings.is_empty() {
            return bad("settings must not be empty");
        }
        if self.estimators.is_empty() {
            return bad("estimators must not be empty");
        }
        if self.regimes.is_empty() {
            return bad("regimes must not be empty");
        }
        if self.metrics_k.is_empty() || self.metrics_k.contains(&0) {
            return bad("metrics_k must be a non-empty list of positive integers");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must be in (0, 1)");
        }
        if !(self.dlfe_alpha > 0.0 && self.dlfe_alpha <= 1.0) {
            return bad("dlfe_alpha must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must be in [0, 1]");
        }
        if self.gen.num_images < 2 {
            return bad("gen.num_images must be at least 2 to hold out test images");
        }
        self.gen.validate()?;
        self.train.validate()?;
        self.buckets.sizes(self.gen.num_classes)?;
        Ok(())
    }

    /// Hash of the experiment definition; `output_dir` is excluded.
    pub fn config_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
        }
        sha256_json(&v)
    }

    /// The corpus configuration with its seed derived from the root seed.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            rng_seed: rng::derive_seed(self.seed, "corpus", &[]),
            ..self.gen.clone()
        }
    }

    /// Identifies the labeled corpus; runs are comparable only when equal.
    pub fn gen_config_hash(&self) -> Result<String> {
        sha256_json(&(self.gen_config(), rng::derive_seed(self.seed, "scar", &[])))
    }

    pub fn train_config(&self, setting: Setting) -> TrainConfig {
        TrainConfig {
            rng_seed: rng::derive_seed(self.seed, "training", &[setting.index()]),
            ..self.train.clone()
        }
    }

    fn detection_seed(&self, setting: Setting) -> u64 {
        rng::derive_seed(self.seed, "detection", &[setting.index()])
    }

    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

/// Joins a relative path onto `$DLFE_OUTPUT_ROOT` when that is set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("malformed override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("override {key:?}: {part:?} is not a table"))
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// value, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    set_dotted(table, key.trim(), value)
}

/// Tables merged key by key into the defaults; any other value, including
/// the untagged enum tables, replaces its default wholesale.
const MERGED_TABLES: [&[&str]; 3] = [&["gen"], &["gen", "detection"], &["train"]];

fn merge_into(base: &mut toml::Table, user: toml::Table, path: &mut Vec<String>) {
    for (key, value) in user {
        path.push(key.clone());
        let mergeable = MERGED_TABLES.iter().any(|p| p.iter().eq(path.iter()));
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if mergeable => {
                merge_into(b, u, path)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
        path.pop();
    }
}

/// Parses a TOML config layered over [`ExperimentConfig::default`] and
/// applies overrides.
pub fn parse_config(text: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut user: toml::Table = match text {
        Some(t) => toml::from_str(t).map_err(|e| Error::InvalidConfig(e.to_string()))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    let mut table = toml::Table::try_from(ExperimentConfig::default())
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    merge_into(&mut table, user, &mut Vec::new());
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| {
            Error::InvalidConfig(format!("cannot read {}: {e}", p.display()))
        })?),
        None => None,
    };
    parse_config(text.as_deref(), overrides)
}

/// A labeled corpus split into training and test images.
pub struct PreparedCorpus {
    pub gen: GenConfig,
    pub corpus: Corpus,
    pub num_test: usize,
}

impl PreparedCorpus {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let gen = cfg.gen_config();
        let mut corpus = generate_corpus(&gen)?;
        let examples = std::mem::take(&mut corpus.examples);
        corpus.examples = scar_delete(examples, &corpus.c_true, rng::derive_seed(cfg.seed, "scar", &[]))?;
        Ok(Self::split(cfg, gen, corpus))
    }

    /// Loads a corpus written by [`gen_verb`], checking it matches `cfg`.
    pub fn load(cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let (gen, corpus) = read_corpus(dir)?;
        let expected = cfg.gen_config();
        if gen != expected {
            return Err(Error::MismatchedCorpora {
                left: sha256_json(&expected)?,
                right: sha256_json(&gen)?,
            });
        }
        Ok(Self::split(cfg, gen, corpus))
    }

    fn split(cfg: &ExperimentConfig, gen: GenConfig, corpus: Corpus) -> Self {
        let n = corpus.scenes.len();
        let num_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
        Self { gen, corpus, num_test }
    }

    pub fn train_scenes(&self) -> Vec<&Scene> {
        let n = self.corpus.scenes.len() - self.num_test;
        self.corpus.scenes[..n].iter().collect()
    }

    pub fn test_scenes(&self) -> Vec<&Scene> {
        let n = self.corpus.scenes.len() - self.num_test;
        self.corpus.scenes[n..].iter().collect()
    }

    /// Observed labels per class `1..=K` over the training images.
    pub fn labeled_counts(&self) -> Vec<usize> {
        let first_test = (self.corpus.scenes.len() - self.num_test) as u64;
        let mut counts = vec![0; self.gen.num_classes];
        for e in &self.corpus.examples {
            if e.s != 0 && e.image_id < first_test {
                counts[e.s - 1] += 1;
            }
        }
        counts
    }

    fn train_view(&self, cfg: &ExperimentConfig, setting: Setting) -> SettingView<'_> {
        SettingView::new(
            setting,
            &self.gen,
            self.train_scenes(),
            &self.corpus.examples,
            cfg.flip_prob,
            cfg.detection_seed(setting),
        )
    }
}

/// A trained biased model and the DLFE state accumulated while training it.
pub struct TrainedSetting {
    pub setting: Setting,
    pub params: ClassifierParams,
    pub history: TrainHistory,
    pub dlfe: EstimatorState,
}

pub fn train_setting(
    cfg: &ExperimentConfig,
    prep: &PreparedCorpus,
    setting: Setting,
) -> Result<TrainedSetting> {
    let view = prep.train_view(cfg, setting);
    let mut state = EstimatorState::new(prep.gen.num_classes, cfg.dlfe_alpha)?;
    let mut hook = |batch: &BatchView<'_>| state.observe_batch(batch);
    let outcome = train_biased(
        &view,
        prep.gen.num_classes,
        prep.gen.feature_dim,
        &cfg.train_config(setting),
        Some(&mut hook),
    )?;
    Ok(TrainedSetting {
        setting,
        params: outcome.params,
        history: outcome.history,
        dlfe: state,
    })
}

/// Train-Est over one unaugmented pass of the images the model trained on.
pub fn estimate_train_est(
    cfg: &ExperimentConfig,
    prep: &PreparedCorpus,
    setting: Setting,
    params: &ClassifierParams,
) -> Result<Estimate> {
    let view = prep.train_view(cfg, setting);
    let (train_idx, _) = validation_split(view.scenes().len(), &cfg.train_config(setting));
    let examples = view.train_est_examples(&train_idx)?;
    train_est(
        |x| predict(params, x),
        examples.iter().map(|(r, x)| (*r, x.as_slice())),
        prep.gen.num_classes,
    )
}

/// Biased predictions on the test images of one setting, ready to be
/// recovered with any estimate.
pub struct Scorer {
    setting: Setting,
    view: EvalView,
    gt: GroundTruthSet,
    probs: Vec<Vec<ProbabilityVector>>,
}

impl Scorer {
    pub fn new(
        cfg: &ExperimentConfig,
        prep: &PreparedCorpus,
        setting: Setting,
        params: &ClassifierParams,
    ) -> Result<Self> {
        let view = SettingView::new(
            setting,
            &prep.gen,
            prep.test_scenes(),
            &prep.corpus.examples,
            0.0,
            cfg.detection_seed(setting),
        )
        .eval_view(cfg.eval_labels)?;
        let gt = view.ground_truth(prep.gen.num_classes)?;
        let probs = view
            .images
            .iter()
            .map(|img| img.examples.iter().map(|e| predict(params, &e.x)).collect())
            .collect::<Result<_>>()?;
        Ok(Self {
            setting,
            view,
            gt,
            probs,
        })
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn ground_truth(&self) -> &GroundTruthSet {
        &self.gt
    }

    /// Every biased posterior computed for the test images.
    pub fn probabilities(&self) -> impl Iterator<Item = &ProbabilityVector> {
        self.probs.iter().flatten()
    }

    /// Ranked predictions per image, concatenated, for `c` (`None` keeps the
    /// biased scores).
    pub fn rank(
        &self,
        c: Option<&LabelFrequencies>,
        regime: Regime,
        renormalize: bool,
        top_k: usize,
    ) -> Result<Vec<ScoredPrediction>> {
        let mut out = Vec::new();
        for (img, probs) in self.view.images.iter().zip(&self.probs) {
            let pairs = img
                .examples
                .iter()
                .zip(probs)
                .map(|(e, p)| {
                    let scores = match c {
                        Some(c) => recover(p, c)?,
                        None => RecoveredScores::biased(p),
                    };
                    Ok((e.pair, if renormalize { scores.renormalized() } else { scores }))
                })
                .collect::<Result<Vec<_>>>()?;
            out.extend(rank_predictions(img.image_id, &pairs, regime.graph_constraint(), top_k));
        }
        Ok(out)
    }

    pub fn evaluate(
        &self,
        cfg: &ExperimentConfig,
        c: Option<&LabelFrequencies>,
        class_frequency_order: &[usize],
    ) -> Result<MetricsReport> {
        let max_k = cfg.metrics_k.iter().copied().max().unwrap_or(0);
        let mut ranked = BTreeMap::new();
        for &regime in &cfg.regimes {
            ranked.insert(regime, self.rank(c, regime, cfg.renormalize, max_k)?);
        }
        evaluate(
            &ranked,
            &self.gt,
            self.view.matches.as_ref(),
            &cfg.metrics_k,
            class_frequency_order,
            &cfg.buckets,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimator: EstimatorKind,
    pub report: MetricsReport,
}

/// Valid labeled examples seen per class by each estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidCounts {
    pub train_est: Vec<u64>,
    /// Summed over every training epoch.
    pub dlfe: Vec<u64>,
    pub dlfe_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingRecord {
    pub setting: Setting,
    pub train_history: TrainHistory,
    /// Each tagged with the setting it was produced under.
    pub estimates: Vec<FrequencyFile>,
    pub valid_counts: ValidCounts,
    pub reports: Vec<EstimatorReport>,
}

impl SettingRecord {
    pub fn report(&self, estimator: EstimatorKind) -> Option<&MetricsReport> {
        self.reports
            .iter()
            .find(|r| r.estimator == estimator)
            .map(|r| &r.report)
    }

    pub fn estimate(&self, estimator: EstimatorKind) -> Option<&FrequencyFile> {
        self.estimates
            .iter()
            .find(|e| e.estimator == estimator.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub software_version: String,
    pub config_hash: String,
    pub gen_config_hash: String,
    pub config: ExperimentConfig,
    pub c_true: Vec<f64>,
    /// Observed training labels per class.
    pub labeled_counts: Vec<usize>,
    /// Classes by descending training frequency; defines the buckets.
    pub class_frequency_order: Vec<usize>,
    pub settings: Vec<SettingRecord>,
    /// Seconds per `setting/stage`, plus `total`.
    pub wall_clock_secs: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn setting(&self, setting: Setting) -> Option<&SettingRecord> {
        self.settings.iter().find(|s| s.setting == setting)
    }

    /// Everything except wall-clock timings; byte-stable across reruns.
    pub fn metrics_document(&self) -> MetricsDocument<'_> {
        MetricsDocument {
            software_version: &self.software_version,
            config_hash: &self.config_hash,
            gen_config_hash: &self.gen_config_hash,
            c_true: &self.c_true,
            labeled_counts: &self.labeled_counts,
            class_frequency_order: &self.class_frequency_order,
            settings: &self.settings,
        }
    }
}

#[derive(Serialize)]
pub struct MetricsDocument<'a> {
    pub software_version: &'a str,
    pub config_hash: &'a str,
    pub gen_config_hash: &'a str,
    pub c_true: &'a [f64],
    pub labeled_counts: &'a [usize],
    pub class_frequency_order: &'a [usize],
    pub settings: &'a [SettingRecord],
}

fn frequency_file(setting: Setting, kind: EstimatorKind, alpha: Option<f64>, est: &Estimate) -> FrequencyFile {
    FrequencyFile::from_estimate(setting.as_str(), kind.as_str(), alpha, est)
}

fn estimate_for(
    record: &[FrequencyFile],
    setting: Setting,
    kind: EstimatorKind,
) -> Result<Option<LabelFrequencies>> {
    if kind == EstimatorKind::None {
        return Ok(None);
    }
    let file = record
        .iter()
        .find(|f| f.estimator == kind.as_str())
        .ok_or_else(|| Error::InvalidInput(format!("no {} estimate", kind.as_str())))?;
    if file.setting != setting.as_str() {
        return Err(Error::InvalidInput(format!(
            "estimate produced under {} cannot be used for {}",
            file.setting,
            setting.as_str()
        )));
    }
    file.frequencies().map(Some)
}

/// Runs the full pipeline in memory. Nothing is written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let mut clock = BTreeMap::new();

    let t = Instant::now();
    let prep = PreparedCorpus::generate(cfg).map_err(|e| e.in_stage("gen"))?;
    clock.insert("gen".to_string(), t.elapsed().as_secs_f64());
    let labeled_counts = prep.labeled_counts();
    let class_order = frequency_order(&labeled_counts);
    let c_true = prep.corpus.c_true.clone();
    let k = prep.gen.num_classes;

    let mut settings = Vec::new();
    for &setting in &cfg.settings {
        let name = setting.as_str();
        log::info!("{name}: training");
        let t = Instant::now();
        let trained = train_setting(cfg, &prep, setting).map_err(|e| e.in_stage("train"))?;
        clock.insert(format!("{name}/train"), t.elapsed().as_secs_f64());

        let dlfe = trained.dlfe.finalize().map_err(|e| e.in_stage("estimate"))?;
        let t = Instant::now();
        let te = estimate_train_est(cfg, &prep, setting, &trained.params)
            .map_err(|e| e.in_stage("estimate"))?;
        clock.insert(format!("{name}/train_est"), t.elapsed().as_secs_f64());

        let mut estimates = Vec::new();
        for &kind in &cfg.estimators {
            let file = match kind {
                EstimatorKind::None => continue,
                EstimatorKind::TrainEst => frequency_file(setting, kind, None, &te),
                EstimatorKind::Dlfe => frequency_file(setting, kind, Some(cfg.dlfe_alpha), &dlfe),
                EstimatorKind::GroundTruthC => FrequencyFile {
                    setting: name.to_string(),
                    alpha: None,
                    c: c_true.clone(),
                    missing: Vec::new(),
                    valid_counts: vec![0; k],
                    estimator: kind.as_str().to_string(),
                },
            };
            estimates.push(file);
        }

        log::info!("{name}: evaluating");
        let t = Instant::now();
        let scorer =
            Scorer::new(cfg, &prep, setting, &trained.params).map_err(|e| e.in_stage("evaluate"))?;
        let mut reports = Vec::new();
        for &kind in &cfg.estimators {
            let c = estimate_for(&estimates, setting, kind).map_err(|e| e.in_stage("recover"))?;
            let report = scorer
                .evaluate(cfg, c.as_ref(), &class_order)
                .map_err(|e| e.in_stage("evaluate"))?;
            reports.push(EstimatorReport {
                estimator: kind,
                report,
            });
        }
        clock.insert(format!("{name}/evaluate"), t.elapsed().as_secs_f64());

        settings.push(SettingRecord {
            setting,
            valid_counts: ValidCounts {
                train_est: te.valid_counts.clone(),
                dlfe: dlfe.valid_counts.clone(),
                dlfe_epochs: trained.history.epoch_train_loss.len(),
            },
            train_history: trained.history,
            estimates,
            reports,
        });
    }
    clock.insert("total".to_string(), started.elapsed().as_secs_f64());

    Ok(RunRecord {
        software_version: SOFTWARE_VERSION.to_string(),
        config_hash: cfg.config_hash()?,
        gen_config_hash: cfg.gen_config_hash()?,
        config: cfg.clone(),
        c_true,
        labeled_counts,
        class_frequency_order: class_order,
        settings,
        wall_clock_secs: clock,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    setting: &'a str,
    estimator: &'a str,
    regime: &'a str,
    k: usize,
    recall: String,
    mean_recall: String,
    head: String,
    middle: String,
    tail: String,
}

/// One CSV row per (setting, estimator, regime, K).
pub fn metrics_csv(settings: &[SettingRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in settings {
        for r in &s.reports {
            for e in &r.report.entries {
                w.serialize(MetricsRow {
                    setting: s.setting.as_str(),
                    estimator: r.estimator.as_str(),
                    regime: e.regime.as_str(),
                    k: e.k,
                    recall: fmt_opt(e.recall),
                    mean_recall: fmt_opt(e.mean_recall),
                    head: fmt_opt(e.buckets.head),
                    middle: fmt_opt(e.buckets.middle),
                    tail: fmt_opt(e.buckets.tail),
                })?;
            }
        }
    }
    w.into_inner()
        .map_err(|e| Error::io("<metrics.csv>", e.into_error()))
}

fn write_files(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        if let Err(e) = write_atomic(&path, bytes) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    Ok(written)
}

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes every report of `record` into `dir`. The run record goes last, so
/// its presence marks a complete run; on failure the files already written
/// are removed.
pub fn write_run_outputs(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = vec![
        (METRICS_JSON_FILE.to_string(), json_bytes(&record.metrics_document())?),
        (METRICS_CSV_FILE.to_string(), metrics_csv(&record.settings)?),
    ];
    for s in &record.settings {
        for e in &s.estimates {
            files.push((
                format!("label_freq_{}_{}.json", e.setting, e.estimator),
                json_bytes(e)?,
            ));
        }
    }
    files.extend(plot_files(record)?);
    files.push((RUN_RECORD_FILE.to_string(), json_bytes(record)?));
    write_files(dir, &files)
}

/// Runs the pipeline and writes its outputs under the resolved output dir.
pub fn run_verb(cfg: &ExperimentConfig) -> Result<(RunRecord, PathBuf)> {
    let record = run_experiment(cfg)?;
    let dir = cfg.resolved_output_dir();
    write_run_outputs(&record, &dir).map_err(|e| e.in_stage("write"))?;
    Ok((record, dir))
}

fn tsv(header: &[String], rows: &[Vec<String>]) -> Vec<u8> {
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out.into_bytes()
}

fn ratio(n: u64, d: usize) -> String {
    if d == 0 {
        "NA".into()
    } else {
        format!("{}", n as f64 / d as f64)
    }
}

fn plot_files(record: &RunRecord) -> Result<Vec<(String, Vec<u8>)>> {
    let k = record.c_true.len();
    let mut files = Vec::new();

    // Valid-example ratio per class: valid labeled examples over labeled
    // training instances. The DLFE column sums over epochs.
    let mut header = vec!["class".to_string()];
    for s in &record.settings {
        let n = s.setting.as_str();
        header.extend([
            format!("{n}_labeled"),
            format!("{n}_train_est_valid"),
            format!("{n}_dlfe_valid"),
            format!("{n}_train_est_ratio"),
            format!("{n}_dlfe_ratio"),
            format!("{n}_dlfe_ratio_per_epoch"),
        ]);
    }
    let rows: Vec<Vec<String>> = (0..k)
        .map(|r| {
            let mut row = vec![(r + 1).to_string()];
            let labeled = record.labeled_counts[r];
            for s in &record.settings {
                let v = &s.valid_counts;
                let epochs = v.dlfe_epochs.max(1) as f64;
                row.extend([
                    labeled.to_string(),
                    v.train_est[r].to_string(),
                    v.dlfe[r].to_string(),
                    ratio(v.train_est[r], labeled),
                    ratio(v.dlfe[r], labeled),
                    if labeled == 0 {
                        "NA".into()
                    } else {
                        format!("{}", v.dlfe[r] as f64 / labeled as f64 / epochs)
                    },
                ]);
            }
            row
        })
        .collect();
    files.push((VALID_RATIO_FILE.to_string(), tsv(&header, &rows)));

    // Estimated label frequencies per setting and estimator.
    let mut header = vec!["class".to_string(), "c_true".to_string()];
    let mut columns: Vec<&FrequencyFile> = Vec::new();
    for s in &record.settings {
        for e in &s.estimates {
            if e.estimator != EstimatorKind::GroundTruthC.as_str() {
                header.push(format!("{}_{}", e.setting, e.estimator));
                columns.push(e);
            }
        }
    }
    let rows: Vec<Vec<String>> = (0..k)
        .map(|r| {
            let mut row = vec![(r + 1).to_string(), format!("{}", record.c_true[r])];
            row.extend(columns.iter().map(|e| format!("{}", e.c[r])));
            row
        })
        .collect();
    files.push((LABEL_FREQ_FILE.to_string(), tsv(&header, &rows)));

    // Per-class ng recall change against the biased baseline.
    let regime = if record.config.regimes.contains(&Regime::Ng) {
        Regime::Ng
    } else {
        Regime::Constraint
    };
    let mut header = vec!["class".to_string()];
    // (estimator, baseline) per-class recall for each column.
    type PerClass = Vec<Option<f64>>;
    let mut columns: Vec<(PerClass, PerClass)> = Vec::new();
    for s in &record.settings {
        let Some(base) = s.report(EstimatorKind::None) else {
            continue;
        };
        for r in &s.reports {
            for &kk in &record.config.metrics_k {
                let (Some(a), Some(b)) = (r.report.get(regime, kk), base.get(regime, kk)) else {
                    continue;
                };
                header.push(format!(
                    "{}_{}_{}R@{}",
                    s.setting.as_str(),
                    r.estimator.as_str(),
                    if regime == Regime::Ng { "ng" } else { "" },
                    kk
                ));
                columns.push((a.per_class_recall.clone(), b.per_class_recall.clone()));
            }
        }
    }
    if header.len() > 1 {
        let rows: Vec<Vec<String>> = (0..k)
            .map(|r| {
                let mut row = vec![(r + 1).to_string()];
                row.extend(columns.iter().map(|(a, b)| match (a[r], b[r]) {
                    (Some(a), Some(b)) => format!("{}", a - b),
                    _ => "NA".to_string(),
                }));
                row
            })
            .collect();
        files.push((RECALL_DELTA_FILE.to_string(), tsv(&header, &rows)));
    } else {
        log::warn!("no \"none\" baseline in the run; skipping {RECALL_DELTA_FILE}");
    }
    Ok(files)
}

/// Writes the figure-analogue TSV files for `record` into `dir`.
pub fn emit_plot_data(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    write_files(dir, &plot_files(record)?)
}

pub fn read_run_record(path: &Path) -> Result<RunRecord> {
    let path = if path.is_dir() {
        path.join(RUN_RECORD_FILE)
    } else {
        path.to_path_buf()
    };
    read_json(&path)
}

/// Mean recall table: one row per estimator (averaged over `records`), one
/// column per (setting, regime, K).
pub fn compare_runs(records: &[RunRecord]) -> Result<String> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidInput("no run records to compare".into()))?;
    for r in &records[1..] {
        if r.gen_config_hash != first.gen_config_hash {
            return Err(Error::MismatchedCorpora {
                left: first.gen_config_hash.clone(),
                right: r.gen_config_hash.clone(),
            });
        }
    }
    let mut columns: BTreeSet<(Setting, Regime, usize)> = BTreeSet::new();
    let mut cells: BTreeMap<(EstimatorKind, Setting, Regime, usize), Vec<f64>> = BTreeMap::new();
    let mut runs: BTreeMap<EstimatorKind, BTreeSet<String>> = BTreeMap::new();
    for rec in records {
        for s in &rec.settings {
            for r in &s.reports {
                runs.entry(r.estimator).or_default().insert(rec.config_hash.clone());
                for e in &r.report.entries {
                    columns.insert((s.setting, e.regime, e.k));
                    if let Some(m) = e.mean_recall {
                        cells.entry((r.estimator, s.setting, e.regime, e.k)).or_default().push(m);
                    }
                }
            }
        }
    }
    let mut out = String::from("estimator,runs");
    for (s, g, k) in &columns {
        let _ = write!(out, ",{}/{}/mR@{k}", s.as_str(), g.as_str());
    }
    out.push('\n');
    for (est, hashes) in &runs {
        let _ = write!(out, "{},{}", est.as_str(), hashes.len());
        for &(s, g, k) in &columns {
            match cells.get(&(*est, s, g, k)) {
                Some(v) if !v.is_empty() => {
                    let _ = write!(out, ",{}", v.iter().sum::<f64>() / v.len() as f64);
                }
                _ => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Generates the labeled corpus and writes it to `dir`.
pub fn gen_verb(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let prep = PreparedCorpus::generate(cfg).map_err(|e| e.in_stage("gen"))?;
    crate::synth::write_corpus(dir, &prep.gen, &prep.corpus).map_err(|e| e.in_stage("gen"))
}

fn prepared(cfg: &ExperimentConfig, corpus_dir: Option<&Path>) -> Result<PreparedCorpus> {
    match corpus_dir {
        Some(d) => PreparedCorpus::load(cfg, d),
        None => PreparedCorpus::generate(cfg),
    }
    .map_err(|e| e.in_stage("gen"))
}

pub fn model_stem(setting: Setting) -> String {
    format!("model_{}", setting.as_str())
}

pub fn frequency_file_name(setting: Setting, kind: EstimatorKind) -> String {
    format!("label_freq_{}_{}.json", setting.as_str(), kind.as_str())
}

/// Trains one setting; writes the model, its history and the DLFE estimate.
pub fn train_verb(
    cfg: &ExperimentConfig,
    setting: Setting,
    corpus_dir: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let prep = prepared(cfg, corpus_dir)?;
    let trained = train_setting(cfg, &prep, setting).map_err(|e| e.in_stage("train"))?;
    let dlfe = trained.dlfe.finalize().map_err(|e| e.in_stage("estimate"))?;
    crate::classifier::save_params(out, &model_stem(setting), &trained.params, &cfg.train_config(setting))?;
    write_json_atomic(&out.join(format!("train_history_{}.json", setting.as_str())), &trained.history)?;
    write_json_atomic(
        &out.join(frequency_file_name(setting, EstimatorKind::Dlfe)),
        &frequency_file(setting, EstimatorKind::Dlfe, Some(cfg.dlfe_alpha), &dlfe),
    )
}

/// Runs Train-Est with a saved model.
pub fn estimate_verb(
    cfg: &ExperimentConfig,
    setting: Setting,
    corpus_dir: Option<&Path>,
    model_dir: &Path,
    out: &Path,
) -> Result<()> {
    let prep = prepared(cfg, corpus_dir)?;
    let (params, _) = crate::classifier::load_params(model_dir, &model_stem(setting))?;
    let te = estimate_train_est(cfg, &prep, setting, &params).map_err(|e| e.in_stage("estimate"))?;
    write_json_atomic(
        &out.join(frequency_file_name(setting, EstimatorKind::TrainEst)),
        &frequency_file(setting, EstimatorKind::TrainEst, None, &te),
    )
}

/// Evaluates a saved model with one estimator. `freq_file` is required for
/// `train_est` and `dlfe` and must carry the same setting tag.
pub fn evaluate_verb(
    cfg: &ExperimentConfig,
    setting: Setting,
    corpus_dir: Option<&Path>,
    model_dir: &Path,
    estimator: EstimatorKind,
    freq_file: Option<&Path>,
    out: &Path,
) -> Result<MetricsReport> {
    let prep = prepared(cfg, corpus_dir)?;
    let (params, _) = crate::classifier::load_params(model_dir, &model_stem(setting))?;
    let c = match estimator {
        EstimatorKind::None => None,
        EstimatorKind::GroundTruthC => Some(LabelFrequencies::new(prep.corpus.c_true.clone())?),
        EstimatorKind::TrainEst | EstimatorKind::Dlfe => {
            let path = freq_file.map(Path::to_path_buf).unwrap_or_else(|| {
                model_dir.join(frequency_file_name(setting, estimator))
            });
            let file: FrequencyFile = read_json(&path)?;
            if file.estimator != estimator.as_str() {
                return Err(Error::InvalidConfig(format!(
                    "{} holds a {} estimate, not {}",
                    path.display(),
                    file.estimator,
                    estimator.as_str()
                )));
            }
            estimate_for(std::slice::from_ref(&file), setting, estimator)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?
        }
    };
    let order = frequency_order(&prep.labeled_counts());
    let scorer = Scorer::new(cfg, &prep, setting, &params).map_err(|e| e.in_stage("evaluate"))?;
    let report = scorer
        .evaluate(cfg, c.as_ref(), &order)
        .map_err(|e| e.in_stage("evaluate"))?;
    let max_k = cfg.metrics_k.iter().copied().max().unwrap_or(0);
    let stem = format!("{}_{}", setting.as_str(), estimator.as_str());
    let mut files = Vec::new();
    for &regime in &cfg.regimes {
        let preds = scorer.rank(c.as_ref(), regime, cfg.renormalize, max_k)?;
        let mut buf = Vec::new();
        crate::recovery::write_predictions_csv(&mut buf, &preds)?;
        files.push((format!("predictions_{stem}_{}.csv", regime.as_str()), buf));
    }
    let record = SettingRecord {
        setting,
        train_history: TrainHistory::default(),
        estimates: Vec::new(),
        valid_counts: ValidCounts {
            train_est: Vec::new(),
            dlfe: Vec::new(),
            dlfe_epochs: 0,
        },
        reports: vec![EstimatorReport {
            estimator,
            report: report.clone(),
        }],
    };
    files.push((format!("metrics_{stem}.csv"), metrics_csv(std::slice::from_ref(&record))?));
    files.push((format!("metrics_{stem}.json"), json_bytes(&report)?));
    write_files(out, &files).map_err(|e| e.in_stage("write"))?;
    Ok(report)
}
