use dlfe::metrics::Regime;
use dlfe::runner::{
    compare_runs, emit_plot_data, parse_config, run_experiment, write_run_outputs, EstimatorKind, ExperimentConfig,
    METRICS_JSON_FILE, RECALL_DELTA_FILE, VALID_RATIO_FILE,
};
use dlfe::setting::Setting;
use dlfe::synth::GenConfig;
use dlfe::Error;

fn small(seed: u64, settings: &[Setting], estimators: &[EstimatorKind]) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        gen: GenConfig::default(),
        settings: settings.to_vec(),
        estimators: estimators.to_vec(),
        ..ExperimentConfig::default()
    }
}

fn read_tsv(path: &std::path::Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().map(|l| l.split('\t').map(str::to_string).collect::<Vec<_>>());
    let header = lines.next().unwrap();
    (header, lines.collect())
}

#[test]
fn true_frequencies_beat_the_biased_baseline() {
    for seed in 0..3 {
        let cfg = small(seed, &[Setting::PredCls], &[EstimatorKind::None, EstimatorKind::GroundTruthC]);
        let record = run_experiment(&cfg).unwrap();
        let s = record.setting(Setting::PredCls).unwrap();
        let mr = |e| s.report(e).unwrap().get(Regime::Constraint, 20).unwrap().mean_recall.unwrap();
        assert!(
            mr(EstimatorKind::GroundTruthC) > mr(EstimatorKind::None),
            "seed {seed}: {} vs {}",
            mr(EstimatorKind::GroundTruthC),
            mr(EstimatorKind::None)
        );
    }
}

#[test]
fn metric_json_is_reproducible() {
    let cfg = small(4, &[Setting::PredCls, Setting::SgDet], &EstimatorKind::ALL);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        write_run_outputs(&run_experiment(&cfg).unwrap(), d.path()).unwrap();
    }
    let bytes: Vec<Vec<u8>> = dirs.iter().map(|d| std::fs::read(d.path().join(METRICS_JSON_FILE)).unwrap()).collect();
    assert!(!bytes[0].is_empty());
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn plot_tables_have_one_row_per_class() {
    let cfg = small(1, &[Setting::SgDet], &EstimatorKind::ALL);
    let record = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_plot_data(&record, dir.path()).unwrap();
    let k = cfg.gen.num_classes;

    let (header, rows) = read_tsv(&dir.path().join(VALID_RATIO_FILE));
    assert_eq!(rows.len(), k);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (te, dl) = (col("sgdet_train_est_ratio"), col("sgdet_dlfe_ratio"));
    for row in &rows {
        if row[te] != "NA" {
            assert!(row[dl].parse::<f64>().unwrap() >= row[te].parse::<f64>().unwrap(), "{row:?}");
        }
    }

    let (header, rows) = read_tsv(&dir.path().join(RECALL_DELTA_FILE));
    assert_eq!(rows.len(), k);
    for (i, h) in header.iter().enumerate().filter(|(_, h)| h.contains("_none_")) {
        for row in &rows {
            assert!(row[i] == "NA" || row[i].parse::<f64>().unwrap() == 0.0, "{h}: {}", row[i]);
        }
    }
}

#[test]
fn compare_averages_runs_of_one_corpus() {
    let estimators = [EstimatorKind::None, EstimatorKind::Dlfe];
    let a = small(2, &[Setting::PredCls], &estimators);
    let mut b = a.clone();
    b.train.lr_init = 0.005;
    let records = [run_experiment(&a).unwrap(), run_experiment(&b).unwrap()];
    let table = compare_runs(&records).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[1].starts_with("none,2,") && lines[2].starts_with("dlfe,2,"), "{table}");

    let mut c = a.clone();
    c.gen.num_images = 200;
    let other = run_experiment(&c).unwrap();
    assert!(matches!(
        compare_runs(&[records[0].clone(), other]),
        Err(Error::MismatchedCorpora { .. })
    ));
}

#[test]
fn config_hash_ignores_key_order() {
    let a = parse_config(Some("seed = 3\n[train]\nlr_init = 0.02\nmax_iters = 500\n[gen]\nnum_images = 80\n"), &[]).unwrap();
    let b = parse_config(Some("[gen]\nnum_images = 80\n[train]\nmax_iters = 500\nlr_init = 0.02\n"), &["seed=3".into()]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
    assert_ne!(a.config_hash().unwrap(), ExperimentConfig::default().config_hash().unwrap());
}
