//! Scores a hand-built two-image example with and without the graph
//! constraint.

use std::collections::BTreeMap;

use dlfe::metrics::{evaluate, frequency_order, BucketSpec, GroundTruthSet, ImageGroundTruth, Regime, Triple};
use dlfe::recovery::{rank_predictions, RecoveredScores};
use dlfe::synth::PairKey;

fn main() -> dlfe::Result<()> {
    let k = 3;
    let gt = GroundTruthSet::new(
        k,
        vec![
            ImageGroundTruth {
                image_id: 0,
                // Two predicates on the same pair: only ng can retrieve both.
                triples: vec![Triple::new(0, 1, 1), Triple::new(0, 1, 3), Triple::new(1, 2, 1)],
            },
            ImageGroundTruth {
                image_id: 1,
                triples: vec![Triple::new(1, 0, 2)],
            },
        ],
    )?;
    let scores = |v: &[f64]| RecoveredScores::from_scores(v.to_vec());
    let images = [
        (0u64, vec![
            (PairKey::new(0, 1), scores(&[0.5, 0.1, 0.4])?),
            (PairKey::new(1, 2), scores(&[0.3, 0.2, 0.1])?),
            (PairKey::new(2, 0), scores(&[0.05, 0.05, 0.05])?),
        ]),
        (1u64, vec![
            (PairKey::new(1, 0), scores(&[0.2, 0.6, 0.1])?),
            (PairKey::new(0, 1), scores(&[0.1, 0.1, 0.7])?),
        ]),
    ];

    let mut ranked = BTreeMap::new();
    for regime in [Regime::Constraint, Regime::Ng] {
        let preds = images
            .iter()
            .flat_map(|(id, pairs)| rank_predictions(*id, pairs, regime.graph_constraint(), 10))
            .collect::<Vec<_>>();
        ranked.insert(regime, preds);
    }
    let order = frequency_order(gt.class_counts());
    let buckets = BucketSpec::Absolute { head: 1, middle: 1, tail: 1 };
    let report = evaluate(&ranked, &gt, None, &[1, 2, 3], &order, &buckets)?;
    for e in &report.entries {
        println!(
            "{:<10} K={}  R {:.3}  mR {:.3}  per class {:?}",
            e.regime.as_str(),
            e.k,
            e.recall.unwrap_or(f64::NAN),
            e.mean_recall.unwrap_or(f64::NAN),
            e.per_class_recall
        );
    }
    Ok(())
}
