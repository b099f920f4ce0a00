use countlab::harness::{
    build_dataset, build_split, cell_config, emit_report, emit_sweep, grounding_study, reproduce, run_experiment,
    run_experiment_full, run_on, sweep_p, train_model, validate_record_json, ExperimentConfig, HarnessError, RunRecord,
    SweepOptions,
};
use countlab::scn::HeadKind;

fn small(extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut pairs = vec![
        ("train_size", "600"),
        ("test_size", "300"),
        ("trainer.epochs", "2"),
        ("trainer.lr_start_epoch", "2"),
    ];
    pairs.extend_from_slice(extra);
    ExperimentConfig::from_pairs(pairs).unwrap()
}

#[test]
fn record_is_reproducible_and_schema_valid() {
    let config = small(&[("baselines.random", "true"), ("grounding.size", "100")]);
    let record = run_experiment(&config).unwrap();
    assert_eq!(record.selected_epoch, record.history.best_epoch);
    assert!(record.timings.is_some());
    let json = record.canonical_json().unwrap();
    validate_record_json(&json).unwrap();
    validate_record_json(&record.to_json().unwrap()).unwrap();
    let again = reproduce(&record).unwrap();
    assert_eq!(again.canonical_json().unwrap(), json);

    let g = record.grounding.as_ref().unwrap().grounding.as_ref().unwrap();
    assert_eq!(g.questions, 100);
    assert!(g.ground_p.is_some() && g.ap.is_some());
    let random = &record.baselines[0];
    assert_eq!(random.name, "random");
    assert!(random.expected_accuracy.is_some());
}

#[test]
fn schema_rejects_a_tampered_record() {
    let record = run_experiment(&small(&[])).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&record.canonical_json().unwrap()).unwrap();
    v["test"]["accuracy"] = serde_json::json!(140.0);
    assert!(matches!(
        validate_record_json(&v.to_string()),
        Err(HarnessError::Schema(_))
    ));
    v["test"]["accuracy"] = serde_json::json!(40.0);
    v["checkpoint_hash"] = serde_json::json!("nope");
    assert!(validate_record_json(&v.to_string()).is_err());
}

#[test]
fn no_strategy_means_no_label_shift() {
    let config = small(&[
        ("train_size", "4000"),
        ("test_size", "2000"),
        ("strategy", "none"),
        ("p", "0"),
        ("trainer.epochs", "1"),
    ]);
    let record = run_experiment(&config).unwrap();
    assert!(record.shift.validation_test >= 0.99, "{:?}", record.shift);
    assert!(record.split.strategy.is_none());
}

#[test]
fn emit_then_reload_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let record = run_experiment(&small(&[("grounding.size", "60")])).unwrap();
    let out = dir.path().join("report");
    let files = emit_report(&record, &out).unwrap();
    let names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for n in [
        "record.json",
        "per_label_test.csv",
        "history.csv",
        "per_label_grounding.csv",
        "manifest.json",
    ] {
        assert!(names.contains(&n.to_string()), "{names:?}");
    }
    let back = RunRecord::from_json(&std::fs::read_to_string(out.join("record.json")).unwrap()).unwrap();
    assert_eq!(back.canonical_json().unwrap(), record.canonical_json().unwrap());
    let csv = std::fs::read_to_string(out.join("per_label_test.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + record.test.per_label.len());
    assert_eq!(
        record.test.per_label.len(),
        record.test.per_label.iter().filter(|r| r.support > 0).count()
    );
}

#[test]
fn training_never_reads_the_test_pool() {
    let config = small(&[]);
    let clean = build_dataset(&config).unwrap();
    let mut poisoned = clean.clone();
    for i in poisoned.pool("test").unwrap() {
        let t = &mut poisoned.triplets[i];
        t.count = 9;
        for r in &mut t.regions {
            r.feature.iter_mut().for_each(|x| *x = 1e6);
        }
    }
    let a_split = build_split(&config, &clean).unwrap();
    let b_split = build_split(&config, &poisoned).unwrap();
    assert_eq!(
        (&a_split.train, &a_split.validation),
        (&b_split.train, &b_split.validation)
    );
    let a = train_model(&config, HeadKind::Regression, 1.0, &a_split, &clean).unwrap();
    let b = train_model(&config, HeadKind::Regression, 1.0, &b_split, &poisoned).unwrap();
    assert_eq!(
        serde_json::to_string(&a.history).unwrap(),
        serde_json::to_string(&b.history).unwrap()
    );
    assert_eq!(
        serde_json::to_string(a.model.params()).unwrap(),
        serde_json::to_string(b.model.params()).unwrap()
    );
}

#[test]
fn single_cell_sweep_equals_a_direct_run() {
    let base = small(&[]);
    let table = sweep_p(&base, &[0.0], &[HeadKind::Regression], &[11], &SweepOptions::default()).unwrap();
    assert_eq!(table.rows.len(), 1);
    let direct = run_experiment(&cell_config(&base, 0.0, HeadKind::Regression, 11)).unwrap();
    let row = &table.rows[0];
    assert_eq!(row.status, "ok");
    assert_eq!(row.test_accuracy, Some(direct.test.accuracy));
    assert_eq!(row.val_accuracy, Some(direct.history.best_val_accuracy));
    assert_eq!(row.config_hash, direct.config_hash);
}

#[test]
fn resumed_sweep_recomputes_only_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cells");
    let options = SweepOptions {
        cache_dir: Some(cache.clone()),
        parallelism: 2,
    };
    let base = small(&[("trainer.epochs", "1")]);
    let heads = [HeadKind::Regression, HeadKind::Classification];
    let first = sweep_p(&base, &[0.0, 100.0], &heads, &[1], &options).unwrap();
    assert!(first.rows.iter().all(|r| r.status == "ok"));
    let victim = &first.rows[2].config_hash;
    std::fs::remove_file(cache.join(format!("{victim}.json"))).unwrap();

    let second = sweep_p(&base, &[0.0, 100.0], &heads, &[1], &options).unwrap();
    let statuses: Vec<&str> = second.rows.iter().map(|r| r.status.as_str()).collect();
    assert_eq!(statuses, ["cached", "cached", "ok", "cached"]);
    for (a, b) in first.rows.iter().zip(&second.rows) {
        assert_eq!(a.test_accuracy, b.test_accuracy);
    }
    let out = dir.path().join("sweep");
    emit_sweep(&second, &[1], &out).unwrap();
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("strategy,p,variant,seed,config_hash,status,test_accuracy"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn failed_cells_are_marked_and_the_sweep_continues() {
    let base = small(&[("dataset_path", "/nonexistent/data.jsonl")]);
    let table = sweep_p(
        &base,
        &[0.0, 50.0],
        &[HeadKind::Regression],
        &[1, 2],
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.failed(), 4);
    assert!(table.rows.iter().all(|r| r.error.as_deref().unwrap().contains("data")));
    assert_eq!(table.median(0.0, HeadKind::Regression), None);
}

#[test]
fn stage_failures_name_the_stage() {
    let err = run_experiment(&small(&[("dataset_path", "/nonexistent/data.jsonl")])).unwrap_err();
    assert!(matches!(err, HarnessError::Stage { stage: "data", .. }), "{err}");
    assert!(!err.is_validation());
}

#[test]
fn loaded_dataset_gives_the_same_record() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(&[]);
    let d = build_dataset(&config).unwrap();
    let path = dir.path().join("d.jsonl");
    d.write(&path).unwrap();
    let mut loaded = config.clone();
    loaded.dataset_path = Some(path.to_string_lossy().into_owned());
    let a = run_on(&config, &d).unwrap().record;
    let b = run_experiment_full(&loaded).unwrap().record;
    assert_eq!(a.test, b.test);
    assert_eq!(a.history, b.history);
}

#[test]
fn grounding_study_pairs_lambda_settings() {
    let base = small(&[("grounding.size", "80"), ("trainer.epochs", "1")]);
    let study = grounding_study(&base, &[1], 1).unwrap();
    assert_eq!(study.rows.len(), 2);
    assert_eq!((study.rows[0].lambda, study.rows[1].lambda), (0.0, 1.0));
    assert_eq!(study.records[0].dataset_hash, study.records[1].dataset_hash);
    assert!(study.records.iter().all(|r| r.split.strategy.is_none()));
    assert_eq!(study.comparison.seeds, 1);
    let no_set = small(&[]);
    assert!(matches!(
        grounding_study(&no_set, &[1], 1),
        Err(HarnessError::Config(_))
    ));
}
