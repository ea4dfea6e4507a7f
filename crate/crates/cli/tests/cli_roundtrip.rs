//! CLI-level behaviours: config validation, fresh-run protection, report
//! regeneration purity, and the sweep's manifest bookkeeping.

use panlab_cli::config::ExperimentConfig;
use panlab_cli::{report, run_experiment, run_reduced_supervision_sweep};

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
[run]
seed = 5
base_iterations = 25
increment_iterations = 12

[dataset]
seed = 2
train_images = 24
val_images = 6
test_images = 6
canvas = 32
thing_classes = 4
stuff_classes = 2
min_things = 0
max_things = 3

[schedule]
base_count = 4
increment_size = 1

[stream]
mode = "overlap"
seed = 3

[model]
conv_channels = [8, 12]
feat_channels = 16
embed_dim = 16
num_queries = 10

[optimizer]
lr = 0.002
batch_size = 6
"#,
    )
    .unwrap()
}

#[test]
fn fresh_run_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    run_experiment(&cfg, dir.path(), false, Some(1)).unwrap();
    let err = run_experiment(&cfg, dir.path(), false, Some(1)).unwrap_err();
    assert!(err.to_string().contains("--resume"), "{err}");
}

#[test]
fn report_regeneration_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    run_experiment(&cfg, dir.path(), false, None).unwrap();
    let files = ["metrics.csv", "metrics.json", "diagnostics.csv", "train_log.csv"];
    let before: Vec<Vec<u8>> =
        files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    for f in &files {
        std::fs::remove_file(dir.path().join(f)).unwrap();
    }
    assert!(report::render_dir(dir.path()).unwrap());
    for (f, want) in files.iter().zip(&before) {
        let got = std::fs::read(dir.path().join(f)).unwrap();
        assert_eq!(&got, want, "{f} changed across regeneration");
    }
}

#[test]
fn partial_run_renders_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    run_experiment(&cfg, dir.path(), false, Some(1)).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    // header + two rows (val/test) for the single completed step
    assert_eq!(metrics.lines().count(), 3);
    let (_, run) = panlab_cli::load_run(dir.path()).unwrap();
    assert_eq!(run.steps.len(), 1);
    assert_eq!(run.num_steps, 3);
}

#[test]
fn sweep_counts_shrink_with_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.run.eval_final_only = true;
    let table = run_reduced_supervision_sweep(&cfg, &[1.0, 0.5], dir.path()).unwrap();
    assert_eq!(table.rows.len(), 4, "two fractions x two streams");
    for stream in ["overlap", "disjoint"] {
        let full: &panlab_cli::experiment::SweepRow = table
            .rows
            .iter()
            .find(|r| r.fraction == 1.0 && r.stream == stream)
            .unwrap();
        let half = table
            .rows
            .iter()
            .find(|r| r.fraction == 0.5 && r.stream == stream)
            .unwrap();
        let full_total: usize = full.images_per_step[1..].iter().sum();
        let half_total: usize = half.images_per_step[1..].iter().sum();
        assert!(
            half_total < full_total,
            "{stream}: {half_total} should be below {full_total}"
        );
        assert_eq!(
            full.images_per_step[0], half.images_per_step[0],
            "base step untouched"
        );
    }
    assert!(dir.path().join("sweep.csv").exists());
}

#[test]
fn single_step_schedule_reports_absent_pq_new() {
    // T = 2 with one increment still leaves pq_new absent at step 1
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let run = run_experiment(&cfg, dir.path(), false, Some(1)).unwrap();
    assert!(run.steps[0].val.pq_new.is_none());
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let first_row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first_row[3], "", "pq_new renders as an empty cell");
}
