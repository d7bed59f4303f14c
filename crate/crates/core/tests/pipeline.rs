use gesturegen::harness::{
    ablation_sweep, rerun_manifest, run_pipeline, DataSource, ExperimentConfig, RunManifest, SweepAxis, SweepOverride,
    MANIFEST_FILE, REPORT_FILE,
};
use gesturegen::Error;

#[test]
fn tiny_pipeline_resumes_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::tiny();
    let first = run_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(first.report.split, [16, 2, 2]);
    assert_eq!(first.report.metrics.generated_count, 2 * cfg.eval.samples);
    assert!(first.report.metrics.variation > 0.0);
    assert!((0.0..=1.0).contains(&first.report.metrics.bc));
    assert!(dir.path().join(MANIFEST_FILE).exists());
    assert!(first.stages.values().all(|s| !s.resumed));

    let again = run_pipeline(&cfg, dir.path()).unwrap();
    assert!(again.stages.values().all(|s| s.resumed));
    assert_eq!(again.report, first.report);

    let loaded = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    let other = tempfile::tempdir().unwrap();
    let rerun = rerun_manifest(&loaded, other.path()).unwrap();
    assert!(first.differences(&rerun).is_empty(), "{:?}", first.differences(&rerun));
    assert_eq!(
        std::fs::read(dir.path().join(REPORT_FILE)).unwrap(),
        std::fs::read(other.path().join(REPORT_FILE)).unwrap()
    );
}

#[test]
fn changed_eval_settings_rerun_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::tiny();
    run_pipeline(&cfg, dir.path()).unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.eval.samples = 3;
    let m = run_pipeline(&cfg2, dir.path()).unwrap();
    assert!(m.stages["vq"].resumed && m.stages["predictor"].resumed);
    assert!(!m.stages["generate"].resumed && !m.stages["report"].resumed);
}

#[test]
fn stage_failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::tiny();
    cfg.data.source = DataSource::Directory;
    cfg.data.path = Some(dir.path().join("missing"));
    match run_pipeline(&cfg, dir.path()) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "data"),
        other => panic!("expected a stage error, got {other:?}"),
    }

    // a corrupted checkpoint is retrained rather than trusted
    let cfg = ExperimentConfig::tiny();
    run_pipeline(&cfg, dir.path()).unwrap();
    std::fs::write(dir.path().join("vq.ckpt"), b"junk").unwrap();
    let m = run_pipeline(&cfg, dir.path()).unwrap();
    assert!(!m.stages["vq"].resumed);
}

#[test]
fn fusion_sweep_has_matching_rows() {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig::tiny();
    let table = ablation_sweep(&base, &SweepAxis::parse("fusion").unwrap(), dir.path(), 2).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.base_config_digest, base.digest());
    assert!(table.rows.iter().all(|r| r.report.is_some()));
    assert!(table.to_markdown().contains("direct-injection"));

    let dup = SweepOverride {
        label: "same".into(),
        key: "predictor.kv_tokens".into(),
        value: toml::Value::Integer(3),
    };
    let bad = SweepOverride {
        label: "bad".into(),
        key: "predictor.heads".into(),
        value: toml::Value::Integer(3),
    };
    let axis = SweepAxis {
        name: "dup".into(),
        overrides: vec![dup.clone(), bad, SweepOverride { label: "same2".into(), ..dup }],
    };
    let t = ablation_sweep(&base, &axis, dir.path(), 1).unwrap();
    assert!(t.rows[1].error.is_some());
    assert_eq!(t.rows[0].report, t.rows[2].report);
}
