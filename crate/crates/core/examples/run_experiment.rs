//! End-to-end run on the default long-tailed corpus, printing mR@K for every
//! setting and estimator.
//!
//! ```text
//! cargo run --release --example run_experiment -- seed=3 settings='["sgdet"]'
//! ```
//!
//! Arguments are `dotted.key=value` overrides of the experiment config.

use dlfe::metrics::Regime;
use dlfe::runner::{compare_runs, parse_config, run_experiment};

fn main() -> dlfe::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = parse_config(None, &overrides)?;
    let record = run_experiment(&cfg)?;

    println!("c_true: {:.3?}", record.c_true);
    for s in &record.settings {
        println!("\n[{}] {} epochs, {} iterations", s.setting.as_str(),
            s.train_history.epoch_train_loss.len(), s.train_history.iterations);
        for e in &s.estimates {
            println!("  {:<15} c = {:.3?} missing {:?}", e.estimator, e.c, e.missing);
        }
        for r in &s.reports {
            for regime in [Regime::Constraint, Regime::Ng] {
                if let Some(m) = r.report.get(regime, cfg.metrics_k[0]) {
                    println!(
                        "  {:<15} {:<10} R@{k} {:.4} mR@{k} {:.4}  head {:.3} mid {:.3} tail {:.3}",
                        r.estimator.as_str(),
                        regime.as_str(),
                        m.recall.unwrap_or(f64::NAN),
                        m.mean_recall.unwrap_or(f64::NAN),
                        m.buckets.head.unwrap_or(f64::NAN),
                        m.buckets.middle.unwrap_or(f64::NAN),
                        m.buckets.tail.unwrap_or(f64::NAN),
                        k = m.k,
                    );
                }
            }
        }
    }
    println!("\n{}", compare_runs(std::slice::from_ref(&record))?);
    println!("wall clock: {:?}", record.wall_clock_secs);
    Ok(())
}
