//! Label-frequency estimation and debiasing for relation classifiers trained
//! on partially labeled data.
//!
//! A relation classifier fit to annotated-versus-unannotated pairs learns the
//! *labeled* posterior `p(s | x)`. When every relation of class `r` is
//! annotated independently with probability `c_r`, the true posterior is
//! recovered per class as `p(s = r | x) / c_r`. This crate provides:
//!
//! * [`synth`]: a synthetic scene corpus with known `c_r` and detector noise,
//! * [`classifier`]: a linear softmax model and its biased training loop,
//! * [`estimation`]: Train-Est and the online DLFE estimator of `c_r`,
//! * [`recovery`]: score recovery and ranking,
//! * [`metrics`]: R@K, mR@K and head/middle/tail bucket recalls,
//! * [`runner`]: end-to-end experiments, reports and plot data.

pub mod classifier;
pub mod error;
pub mod estimation;
pub mod io;
pub mod metrics;
pub mod recovery;
pub mod rng;
pub mod runner;
pub mod setting;
pub mod synth;

pub use classifier::{predict, train_biased, ClassifierParams, ProbabilityVector, TrainConfig};
pub use error::{Error, Result};
pub use estimation::{train_est, EstimatorState, LabelFrequencies};
pub use metrics::{evaluate, MetricsReport, Regime};
pub use recovery::{rank_predictions, recover, RecoveredScores};
pub use runner::{run_experiment, ExperimentConfig, RunRecord};
pub use setting::Setting;
pub use synth::{generate_corpus, scar_delete, GenConfig};
