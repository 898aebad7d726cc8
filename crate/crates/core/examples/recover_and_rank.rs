//! Recovers unbiased scores from the analytic biased posterior and shows how
//! dividing by the label frequency reorders a pair's predicates.

use dlfe::classifier::{oracle_biased_posterior, oracle_unbiased_posterior};
use dlfe::estimation::LabelFrequencies;
use dlfe::recovery::{rank_predictions, recover, RecoveredScores};
use dlfe::synth::{GenConfig, PairKey};

fn main() -> dlfe::Result<()> {
    let gen = GenConfig::default();
    let centers = gen.centers()?;
    let c = LabelFrequencies::new(gen.c_true())?;

    // Walk from a head center (class 1) toward a tail center (class 18) and
    // stop where the biased posterior still prefers the head while the
    // recovered scores already prefer the tail.
    let point = |w: f64| -> Vec<f64> {
        centers[0].iter().zip(&centers[17]).map(|(a, b)| (1.0 - w) * a + w * b).collect()
    };
    let mut w = 0.5;
    let (x, biased, recovered) = loop {
        let x = point(w);
        let biased = oracle_biased_posterior(&gen, &x)?;
        let recovered = recover(&biased, &c)?;
        if biased.get(1) > biased.get(18) && recovered.of(18) > recovered.of(1) || w >= 1.0 {
            break (x, biased, recovered);
        }
        w += 0.005;
    };
    let truth = oracle_unbiased_posterior(&gen, &x)?;
    println!("at w = {w:.3} along the head-to-tail segment");
    for r in [1, 18] {
        println!(
            "class {r:>2}: biased {:.4}  recovered {:.4}  true {:.4}",
            biased.get(r),
            recovered.of(r),
            truth.get(r)
        );
    }

    let pair = PairKey::new(0, 1);
    let before = rank_predictions(0, &[(pair, RecoveredScores::biased(&biased))], false, 3);
    let after = rank_predictions(0, &[(pair, recovered)], false, 3);
    let show = |preds: &[dlfe::recovery::ScoredPrediction]| {
        preds.iter().map(|p| format!("{}:{:.3}", p.predicate, p.score)).collect::<Vec<_>>().join("  ")
    };
    println!("top-3 biased:    {}", show(&before));
    println!("top-3 recovered: {}", show(&after));
    Ok(())
}
