use slatelab::models::{ModelKind, TrainConfig};
use slatelab::pipeline::{run_pipeline, run_stage, sha256_file, Paths, RunConfig, Stage};
use slatelab::sim::ArmPolicy;
use std::collections::BTreeMap;
use std::path::Path;

fn small(root: &Path, seed: u64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        ..RunConfig::default()
    };
    c.paths = Paths::default().rooted(root);
    c.world.n_users = 160;
    c.world.n_stories = 90;
    c.compare.history_days = 28;
    c.compare.min_user_interactions = 10;
    c.compare.min_story_interactions = 10;
    c.compare.train = TrainConfig {
        k_grid: vec![2],
        l2_grid: vec![1e-4],
        epochs: 5,
        ..TrainConfig::default()
    };
    c.experiment.pre_days = 14;
    c.experiment.duration_days = 7;
    c.experiment.min_interactions = 10;
    c.experiment.train = c.compare.train.clone();
    c.analysis.n_buckets = 4;
    c.ope.dr.bootstrap = 20;
    c.ope.dr.max_clipped_fraction = 1.0;
    c
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for d in ["data", "models", "reports"] {
        for e in std::fs::read_dir(root.join(d)).unwrap() {
            let p = e.unwrap().path();
            out.insert(
                format!("{d}/{}", p.file_name().unwrap().to_string_lossy()),
                std::fs::read(&p).unwrap(),
            );
        }
    }
    out
}

#[test]
fn pipeline_emits_every_table_and_replays_byte_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let manifests = run_pipeline(&small(a.path(), 5)).unwrap();
    run_pipeline(&small(b.path(), 5)).unwrap();
    assert_eq!(manifests.len(), Stage::ALL.len());
    let ta = tree(a.path());
    for f in [
        "data/history.csv",
        "data/pre.csv",
        "data/experiment.csv",
        "data/assignment.csv",
        "models/mf.model",
        "models/experiment.model",
        "reports/table1.csv",
        "reports/table5_ate.csv",
        "reports/table6_subgroups.csv",
        "reports/table7_popularity.csv",
        "reports/balance.csv",
        "reports/aipw_regression.csv",
        "reports/calibration.csv",
        "reports/fig_rank_means.csv",
        "reports/fig_session_lengths.csv",
        "reports/fig_buckets.csv",
        "reports/dr_comparison.csv",
        "reports/onpolicy_check.csv",
        "reports/report.md",
        "reports/manifest.evaluate.json",
    ] {
        assert!(ta.contains_key(f), "missing {f}");
    }
    let ate = String::from_utf8(ta["reports/table5_ate.csv"].clone()).unwrap();
    assert_eq!(ate.lines().count(), 1 + 6 * 3);
    let dr = String::from_utf8(ta["reports/dr_comparison.csv"].clone()).unwrap();
    // three single-policy rows and three pairs, each for all/heavy/light
    assert_eq!(dr.lines().count(), 1 + 6 * 3);
    let tb = tree(b.path());
    let differ: Vec<_> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
    assert!(differ.is_empty(), "{differ:?}");
    assert_eq!(ta.len(), tb.len());

    let m = &manifests[Stage::ALL
        .iter()
        .position(|s| *s == Stage::Analyze)
        .unwrap()];
    let exp = m
        .inputs
        .iter()
        .find(|d| d.path == "data/experiment.csv")
        .unwrap();
    assert_eq!(
        exp.sha256,
        sha256_file(&a.path().join("data/experiment.csv")).unwrap()
    );
}

#[test]
fn different_root_seeds_give_different_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_stage(Stage::Experiment, &small(a.path(), 1)).unwrap();
    run_stage(Stage::Experiment, &small(b.path(), 2)).unwrap();
    assert_ne!(
        std::fs::read(a.path().join("data/experiment.csv")).unwrap(),
        std::fs::read(b.path().join("data/experiment.csv")).unwrap()
    );
}

#[test]
fn null_experiment_without_model_skips_calibration() {
    let a = tempfile::tempdir().unwrap();
    let mut c = small(a.path(), 9);
    c.experiment.treatment = ArmPolicy::Editorial;
    c.compare.models = vec![ModelKind::Mean];
    for s in [Stage::Experiment, Stage::Analyze] {
        run_stage(s, &c).unwrap();
    }
    assert!(!a.path().join("models/experiment.model").exists());
    assert!(!a.path().join("reports/calibration.csv").exists());
    assert!(a.path().join("reports/table5_ate.csv").exists());
}

#[test]
fn missing_inputs_are_io_errors() {
    let a = tempfile::tempdir().unwrap();
    let err = run_stage(Stage::Analyze, &small(a.path(), 1)).unwrap_err();
    assert!(matches!(err, slatelab::Error::Io { .. }), "{err}");
}
