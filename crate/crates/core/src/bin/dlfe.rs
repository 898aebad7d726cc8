use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use dlfe::runner::{
    compare_runs, emit_plot_data, estimate_verb, evaluate_verb, gen_verb, load_config,
    read_run_record, run_verb, train_verb, EstimatorKind, ExperimentConfig,
};
use dlfe::Setting;

/// Label-frequency estimation experiments on synthetic relation corpora.
///
/// Relative paths, inputs included, resolve under $DLFE_OUTPUT_ROOT when it
/// is set.
#[derive(Parser)]
#[command(name = "dlfe", version)]
struct Cli {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `dotted.key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a corpus with SCAR label deletion.
    Gen {
        /// Defaults to `<output_dir>/corpus`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the biased classifier for one setting; also writes the DLFE estimate.
    Train {
        #[arg(long)]
        setting: Setting,
        /// Saved corpus; generated from the config when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train-Est label frequencies from a saved model.
    Estimate {
        #[arg(long)]
        setting: Setting,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover, rank and score test images with one estimator.
    Evaluate {
        #[arg(long)]
        setting: Setting,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        estimator: EstimatorKind,
        /// Label-frequency JSON; defaults to the one next to the model.
        #[arg(long)]
        freq: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage for every configured setting and estimator.
    Run,
    /// Figure data files from a run record.
    Plots {
        /// run_record.json or the run directory holding it.
        record: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean-recall table across runs of the same corpus.
    Compare {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(p: &Path) -> PathBuf {
    dlfe::runner::resolve_output(p)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.map(|p| resolve(&p)).unwrap_or_else(|| cfg.resolved_output_dir())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    match cli.verb {
        Verb::Gen { out } => {
            let dir = out
                .map(|p| resolve(&p))
                .unwrap_or_else(|| cfg.resolved_output_dir().join("corpus"));
            gen_verb(&cfg, &dir)?;
            log::info!("corpus written to {}", dir.display());
        }
        Verb::Train { setting, corpus, out } => {
            let dir = out_dir(&cfg, out);
            train_verb(&cfg, setting, corpus.map(|p| resolve(&p)).as_deref(), &dir)?;
            log::info!("model written to {}", dir.display());
        }
        Verb::Estimate { setting, corpus, model, out } => {
            let dir = out_dir(&cfg, out);
            let corpus = corpus.map(|p| resolve(&p));
            estimate_verb(&cfg, setting, corpus.as_deref(), &resolve(&model), &dir)?;
        }
        Verb::Evaluate { setting, corpus, model, estimator, freq, out } => {
            let dir = out_dir(&cfg, out);
            let corpus = corpus.map(|p| resolve(&p));
            let freq = freq.map(|p| resolve(&p));
            let report = evaluate_verb(
                &cfg,
                setting,
                corpus.as_deref(),
                &resolve(&model),
                estimator,
                freq.as_deref(),
                &dir,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Verb::Run => {
            let (record, dir) = run_verb(&cfg)?;
            println!("{}", compare_runs(std::slice::from_ref(&record))?);
            log::info!("run written to {}", dir.display());
        }
        Verb::Plots { record, out } => {
            let record = resolve(&record);
            let rec = read_run_record(&record)?;
            let dir = match out {
                Some(p) => resolve(&p),
                None if record.is_dir() => record.clone(),
                None => record.parent().map(PathBuf::from).unwrap_or_default(),
            };
            for f in emit_plot_data(&rec, &dir)? {
                println!("{}", f.display());
            }
        }
        Verb::Compare { records, out } => {
            let recs = records
                .iter()
                .map(|p| read_run_record(&resolve(p)))
                .collect::<dlfe::Result<Vec<_>>>()?;
            let table = compare_runs(&recs)?;
            match out {
                Some(p) => std::fs::write(resolve(&p), table)
                    .with_context(|| format!("writing {}", p.display()))?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e.downcast_ref::<dlfe::Error>() {
                // Library errors already render their cause.
                Some(err) => {
                    eprintln!("error: {err}");
                    if err.is_config_error() { 1 } else { 2 }
                }
                None => {
                    eprintln!("error: {e:#}");
                    2
                }
            };
            ExitCode::from(code)
        }
    }
}
