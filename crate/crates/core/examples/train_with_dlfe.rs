//! Trains the biased classifier on ground-truth pairs with the DLFE hook
//! attached, then compares the running estimate with the true frequencies.

use dlfe::classifier::{train_biased, Optimizer, StaticExamples, TrainConfig};
use dlfe::estimation::{EstimatorState, DEFAULT_ALPHA};
use dlfe::synth::{generate_corpus, scar_delete, ClassPrior, GenConfig};

fn main() -> dlfe::Result<()> {
    let k = 10;
    let gen = GenConfig {
        num_classes: k,
        feature_dim: k,
        class_prior: ClassPrior::Explicit(vec![1.0 / k as f64; k]),
        num_images: 600,
        objects_per_image: 6,
        pairs_per_image: 20,
        rng_seed: 3,
        ..GenConfig::default()
    };
    let mut corpus = generate_corpus(&gen)?;
    corpus.examples = scar_delete(std::mem::take(&mut corpus.examples), &corpus.c_true, 4)?;

    let train = TrainConfig {
        optimizer: Optimizer::Adam,
        // Keep every unlabeled pair so the learned posterior is not skewed by
        // background subsampling.
        bg_to_fg_ratio: 1000.0,
        ..TrainConfig::default()
    };
    let mut state = EstimatorState::new(k, DEFAULT_ALPHA)?;
    let mut hook = |batch: &dlfe::classifier::BatchView<'_>| state.observe_batch(batch);
    let outcome = train_biased(&StaticExamples::new(&corpus.examples), k, gen.feature_dim, &train, Some(&mut hook))?;
    println!(
        "{} epochs, {} iterations, final train loss {:.4}",
        outcome.history.epoch_train_loss.len(),
        outcome.history.iterations,
        outcome.history.epoch_train_loss.last().copied().unwrap_or(f64::NAN)
    );

    let est = state.finalize()?;
    println!("class  c_true  dlfe    updates");
    for r in 0..k {
        println!(
            "{:>5}  {:.3}   {:.3}   {}",
            r + 1,
            corpus.c_true[r],
            est.frequencies.as_slice()[r],
            state.updates_seen()[r]
        );
    }
    Ok(())
}
