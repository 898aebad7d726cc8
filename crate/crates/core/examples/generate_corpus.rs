//! Generates a long-tailed corpus, deletes labels under SCAR and reports how
//! many positives of each class survive.
//!
//! ```text
//! cargo run --release --example generate_corpus -- [out_dir]
//! ```

use std::path::PathBuf;

use dlfe::synth::{generate_corpus, scar_delete, write_corpus, GenConfig};

fn main() -> dlfe::Result<()> {
    let cfg = GenConfig {
        rng_seed: 7,
        ..GenConfig::default()
    };
    let mut corpus = generate_corpus(&cfg)?;
    corpus.examples = scar_delete(std::mem::take(&mut corpus.examples), &corpus.c_true, 11)?;

    let k = cfg.num_classes;
    let mut positives = vec![0usize; k];
    let mut labeled = vec![0usize; k];
    for e in &corpus.examples {
        if e.y != 0 {
            positives[e.y - 1] += 1;
        }
        if e.s != 0 {
            labeled[e.s - 1] += 1;
        }
    }
    println!(
        "{} images, {} pairs, {} positives",
        corpus.scenes.len(),
        corpus.examples.len(),
        positives.iter().sum::<usize>()
    );
    println!("class  positives  labeled  c_true  observed");
    for r in 0..k {
        let observed = labeled[r] as f64 / positives[r].max(1) as f64;
        println!(
            "{:>5}  {:>9}  {:>7}  {:>6.3}  {:>8.3}",
            r + 1,
            positives[r],
            labeled[r],
            corpus.c_true[r],
            observed
        );
    }

    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        write_corpus(&dir, &cfg, &corpus)?;
        println!("written to {}", dir.display());
    }
    Ok(())
}
