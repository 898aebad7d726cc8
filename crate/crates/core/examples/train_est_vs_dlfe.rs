//! Under simulated detection, Train-Est sees one detector pass per image while
//! DLFE sees a fresh flipped-or-not pass every epoch. This prints, per class,
//! how many valid labeled examples each estimator collected and what it
//! estimated.

use dlfe::classifier::{predict, train_biased, validation_split, BatchView, Optimizer, TrainConfig};
use dlfe::estimation::{train_est, EstimatorState, DEFAULT_ALPHA};
use dlfe::setting::{Setting, SettingView};
use dlfe::synth::{generate_corpus, scar_delete, ClassPrior, GenConfig};

fn main() -> dlfe::Result<()> {
    let gen = GenConfig {
        class_prior: ClassPrior::Geometric { geometric_ratio: 0.75 },
        rng_seed: 21,
        ..GenConfig::default()
    };
    let k = gen.num_classes;
    let mut corpus = generate_corpus(&gen)?;
    corpus.examples = scar_delete(std::mem::take(&mut corpus.examples), &corpus.c_true, 22)?;

    let view = SettingView::new(Setting::SgDet, &gen, corpus.scenes.iter().collect(), &corpus.examples, 0.5, 23);
    let train = TrainConfig {
        optimizer: Optimizer::Adam,
        rng_seed: 24,
        ..TrainConfig::default()
    };
    let mut state = EstimatorState::new(k, DEFAULT_ALPHA)?;
    let mut hook = |b: &BatchView<'_>| state.observe_batch(b);
    let outcome = train_biased(&view, k, gen.feature_dim, &train, Some(&mut hook))?;
    let epochs = outcome.history.epoch_train_loss.len();

    let (train_images, _) = validation_split(corpus.scenes.len(), &train);
    let te_examples = view.train_est_examples(&train_images)?;
    let te = train_est(
        |x| predict(&outcome.params, x),
        te_examples.iter().map(|(r, x)| (*r, x.as_slice())),
        k,
    )?;
    let dlfe = state.finalize()?;

    let mut labeled = vec![0usize; k];
    for e in &corpus.examples {
        if e.s != 0 {
            labeled[e.s - 1] += 1;
        }
    }
    println!("{epochs} epochs of fresh detections");
    println!("class  labeled  te_valid  dlfe_valid  c_true  train_est  dlfe");
    for (r, n_labeled) in labeled.iter().enumerate() {
        let flag = if te.missing.contains(&(r + 1)) { " (median)" } else { "" };
        println!(
            "{:>5}  {:>7}  {:>8}  {:>10}  {:.3}   {:.3}      {:.3}{flag}",
            r + 1,
            n_labeled,
            te.valid_counts[r],
            dlfe.valid_counts[r],
            corpus.c_true[r],
            te.frequencies.as_slice()[r],
            dlfe.frequencies.as_slice()[r],
        );
    }
    println!("Train-Est missing: {:?}, DLFE missing: {:?}", te.missing, dlfe.missing);
    Ok(())
}
