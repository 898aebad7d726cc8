use dlfe::synth::{
    examples_ndjson, generate_corpus, geometric_prior, scar_delete, simulate_detection, valid_pairs, BBox,
    ClassPrior, DetectionNoise, Detector, GenConfig, PairKey, RelationExample,
};
use proptest::prelude::*;

fn within_sigmas(observed: f64, p: f64, n: usize, sigmas: f64) -> bool {
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    (observed - p).abs() <= sigmas * sd
}

fn class_counts(examples: &[RelationExample], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for e in examples.iter().filter(|e| e.y != 0) {
        counts[e.y - 1] += 1;
    }
    counts
}

#[test]
fn two_classes_with_equal_prior_split_evenly() {
    let cfg = GenConfig {
        num_classes: 2,
        feature_dim: 2,
        class_prior: ClassPrior::Explicit(vec![0.5, 0.5]),
        num_images: 1000,
        objects_per_image: 5,
        pairs_per_image: 10,
        rng_seed: 5,
        ..GenConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let counts = class_counts(&corpus.examples, 2);
    let n = counts.iter().sum::<usize>();
    assert_eq!(n, 10_000);
    assert!(within_sigmas(counts[0] as f64 / n as f64, 0.5, n, 3.0), "{counts:?}");
}

#[test]
fn geometric_prior_frequencies_match() {
    let k = 6;
    let cfg = GenConfig {
        num_classes: k,
        feature_dim: k,
        class_prior: ClassPrior::Geometric { geometric_ratio: 0.5 },
        num_images: 1000,
        objects_per_image: 6,
        pairs_per_image: 20,
        rng_seed: 9,
        ..GenConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let counts = class_counts(&corpus.examples, k);
    let n = counts.iter().sum::<usize>();
    for (r, (&got, &p)) in counts.iter().zip(&geometric_prior(k, 0.5)).enumerate() {
        assert!(
            within_sigmas(got as f64 / n as f64, p, n, 3.0),
            "class {}: {} of {n}, expected share {p}",
            r + 1,
            got
        );
    }
}

#[test]
fn scar_keeps_labels_at_the_class_frequency() {
    let c = [0.9, 0.5, 0.1];
    let per_class = 10_000;
    let examples: Vec<RelationExample> = (0..3 * per_class)
        .map(|i| RelationExample {
            image_id: (i / 100) as u64,
            pair: PairKey::new(i % 100, 100),
            x: vec![0.0],
            s: 0,
            y: i % 3 + 1,
        })
        .collect();
    let labeled = scar_delete(examples, &c, 17).unwrap();
    for (r, &cr) in c.iter().enumerate() {
        let kept = labeled.iter().filter(|e| e.y == r + 1 && e.s != 0).count();
        assert!(
            within_sigmas(kept as f64 / per_class as f64, cr, per_class, 3.0),
            "class {}: kept {kept}",
            r + 1
        );
    }
    assert!(labeled.iter().all(|e| e.s == 0 || e.s == e.y));
}

#[test]
fn scar_labeling_ignores_position_within_a_region() {
    let cfg = GenConfig {
        num_classes: 2,
        feature_dim: 2,
        class_prior: ClassPrior::Explicit(vec![0.5, 0.5]),
        label_frequencies: dlfe::synth::FrequencyProfile::Explicit(vec![0.5, 0.5]),
        num_images: 2000,
        objects_per_image: 5,
        pairs_per_image: 10,
        rng_seed: 2,
        ..GenConfig::default()
    };
    let mut corpus = generate_corpus(&cfg).unwrap();
    corpus.examples = scar_delete(std::mem::take(&mut corpus.examples), &corpus.c_true, 3).unwrap();
    let centers = cfg.centers().unwrap();
    for (r, center) in centers.iter().enumerate() {
        let (mut lo, mut hi) = ((0usize, 0usize), (0usize, 0usize));
        for e in corpus.examples.iter().filter(|e| e.y == r + 1) {
            let side = if e.x[r] < center[r] { &mut lo } else { &mut hi };
            side.0 += 1;
            side.1 += (e.s != 0) as usize;
        }
        let (p_lo, p_hi) = (lo.1 as f64 / lo.0 as f64, hi.1 as f64 / hi.0 as f64);
        let sd = (0.25 / lo.0 as f64 + 0.25 / hi.0 as f64).sqrt();
        assert!((p_lo - p_hi).abs() <= 3.0 * sd, "class {}: {p_lo} vs {p_hi}", r + 1);
    }
}

#[test]
fn same_config_gives_identical_examples() {
    let cfg = GenConfig {
        num_images: 40,
        rng_seed: 12,
        ..GenConfig::default()
    };
    let label = |c: &GenConfig| {
        let corpus = generate_corpus(c).unwrap();
        let examples = scar_delete(corpus.examples, &corpus.c_true, 4).unwrap();
        examples_ndjson(&examples).unwrap()
    };
    assert_eq!(label(&cfg), label(&cfg));
    let other = GenConfig { rng_seed: 13, ..cfg.clone() };
    assert_ne!(label(&cfg), label(&other));
}

#[test]
fn matched_fraction_follows_miss_and_relabel_rates() {
    let cfg = GenConfig {
        num_images: 1000,
        objects_per_image: 10,
        pairs_per_image: 5,
        rng_seed: 31,
        ..GenConfig::default()
    };
    let noise = DetectionNoise {
        miss_prob: 0.3,
        box_jitter_sigma: 0.0,
        label_error_prob: 0.1,
    };
    let detector = Detector::from_config(&cfg, noise);
    let corpus = generate_corpus(&cfg).unwrap();
    let mut matched = 0usize;
    let mut total = 0usize;
    for scene in &corpus.scenes {
        let r = simulate_detection(scene, false, &detector, 77);
        matched += r.matching.iter().filter(|m| m.is_some()).count();
        total += scene.objects.len();
    }
    let ko = cfg.num_object_classes as f64;
    let expected = 0.7 * (1.0 - 0.1 * (ko - 1.0) / ko);
    let frac = matched as f64 / total as f64;
    assert!(within_sigmas(frac, expected, total, 3.0), "{frac} vs {expected}");
}

#[test]
fn perfect_detection_makes_every_ordered_pair_valid() {
    let cfg = GenConfig {
        num_images: 20,
        objects_per_image: 7,
        pairs_per_image: 10,
        ..GenConfig::default()
    };
    let detector = Detector::from_config(&cfg, DetectionNoise::none());
    let corpus = generate_corpus(&cfg).unwrap();
    for scene in &corpus.scenes {
        for flipped in [false, true] {
            let r = simulate_detection(scene, flipped, &detector, 1);
            let valid = valid_pairs(&r, scene);
            let n = scene.objects.len();
            assert_eq!(valid.len(), n * (n - 1));
            assert!(valid.iter().all(|v| v.pair == v.gt_pair));
            assert_eq!(valid.iter().filter(|v| v.y != 0).count(), scene.relations.len());
        }
    }
}

#[test]
fn pooled_valid_examples_grow_with_realizations() {
    let cfg = GenConfig {
        num_images: 200,
        rng_seed: 8,
        ..GenConfig::default()
    };
    let k = cfg.num_classes;
    let detector = Detector::from_config(&cfg, cfg.detection);
    let corpus = generate_corpus(&cfg).unwrap();
    let mut pooled = vec![0usize; k];
    let mut previous_total = 0;
    for draw in 0..6u64 {
        let before = pooled.clone();
        for scene in &corpus.scenes {
            let r = simulate_detection(scene, draw % 2 == 1, &detector, 1000 + draw);
            for v in valid_pairs(&r, scene).iter().filter(|v| v.y != 0) {
                pooled[v.y - 1] += 1;
            }
        }
        assert!(pooled.iter().zip(&before).all(|(a, b)| a >= b));
        let total = pooled.iter().sum::<usize>();
        assert!(total > previous_total);
        previous_total = total;
    }
}

proptest! {
    #[test]
    fn flipping_twice_is_identity(
        x1 in 0.0f64..0.5, y1 in 0.0f64..0.5, w in 0.0f64..0.5, h in 0.0f64..0.5,
    ) {
        let b = BBox::new(x1, y1, x1 + w, y1 + h);
        let back = b.flipped().flipped();
        prop_assert!((back.x1 - b.x1).abs() < 1e-12 && (back.x2 - b.x2).abs() < 1e-12);
        prop_assert_eq!(back.y1, b.y1);
        prop_assert_eq!(back.y2, b.y2);
        prop_assert!((b.flipped().area() - b.area()).abs() < 1e-12);
    }

    #[test]
    fn observed_label_is_zero_or_the_true_class(seed in 0u64..1000) {
        let cfg = GenConfig { num_images: 5, rng_seed: seed, ..GenConfig::default() };
        let corpus = generate_corpus(&cfg).unwrap();
        let examples = scar_delete(corpus.examples, &corpus.c_true, seed).unwrap();
        prop_assert!(examples.iter().all(|e| e.s == 0 || e.s == e.y));
        prop_assert!(examples.iter().all(|e| e.y != 0 || e.s == 0));
    }
}
