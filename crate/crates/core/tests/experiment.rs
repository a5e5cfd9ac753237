use std::fs;

use cmo_core::experiment::{make_data, report, run, CellResult, DataManifest, ExperimentConfig, ResultsManifest, RunOptions};
use cmo_core::corpus::load_dataset;
use cmo_core::nn::load_checkpoint;

const GRID: &str = r#"
seeds = [0, 1]

[dataset]
kind = "context_shift"
num_classes = 4
n_max = 16
rho = 8.0
side = 8
test_per_class = 4

[defaults]
epochs = 3
batch_size = 8
warmup_epochs = 1
decay_epochs = [2]
cmo_off_last = 1
model = { kind = "tiny_conv", channels = [2] }

[[methods]]
name = "ce"

[[methods]]
name = "cmo"
variant = "cmo"
"#;

fn options(dir: &std::path::Path) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    }
}

#[test]
fn grid_produces_one_record_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(GRID).unwrap();
    let summary = run(&cfg, &options(dir.path())).unwrap();
    assert_eq!((summary.trained, summary.skipped, summary.failed), (4, 0, 0));
    let m = &summary.manifest;
    let cells: Vec<(&str, u64)> = m.records.iter().map(|r| (r.method.as_str(), r.seed)).collect();
    assert_eq!(cells, [("ce", 0), ("ce", 1), ("cmo", 0), ("cmo", 1)]);
    assert_eq!(ResultsManifest::load(&summary.manifest_path).unwrap(), *m);
    assert_eq!(m.experiment.dataset.head_threshold, Some(3));
    for r in &m.records {
        assert_eq!(r.config.seed, r.seed);
        let model = load_checkpoint(dir.path().join(format!("models/{}-seed{}.cmom", r.method, r.seed))).unwrap();
        assert_eq!(model.num_classes(), 4);
    }
}

#[test]
fn single_cell_grid() {
    let dir = tempfile::tempdir().unwrap();
    let text = GRID.replace("seeds = [0, 1]", "seeds = [3]");
    let text = &text[..text.find("[[methods]]\nname = \"cmo\"").unwrap()];
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    let summary = run(&cfg, &options(dir.path())).unwrap();
    assert_eq!(summary.manifest.records.len(), 1);
    let r = report(&summary.manifest);
    assert_eq!(r.rows[0].metrics[0].unwrap().std, 0.0);
    assert_eq!(r.rows[0].metrics[0].unwrap().delta, Some(0.0));
}

#[test]
fn resume_skips_completed_cells_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(GRID).unwrap();
    let first = run(&cfg, &options(dir.path())).unwrap();
    let before = fs::read(&first.manifest_path).unwrap();
    let again = run(&cfg, &RunOptions { resume: true, ..options(dir.path()) }).unwrap();
    assert_eq!((again.trained, again.skipped), (0, 4));
    assert_eq!(fs::read(&again.manifest_path).unwrap(), before);

    // Changing one method retrains only that method's cells.
    let edited = ExperimentConfig::from_toml_str(&GRID.replace("variant = \"cmo\"", "variant = \"cmo\"\nalpha = 0.5")).unwrap();
    let partial = run(&edited, &RunOptions { resume: true, ..options(dir.path()) }).unwrap();
    assert_eq!((partial.trained, partial.skipped), (2, 2));
}

#[test]
fn repeated_runs_give_identical_metrics() {
    let cfg = ExperimentConfig::from_toml_str(GRID).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(&cfg, &options(a.path())).unwrap().manifest;
    let rb = run(&cfg, &RunOptions { jobs: 3, ..options(b.path()) }).unwrap().manifest;
    assert_eq!(ra.records, rb.records);
    assert_eq!(report(&ra).to_csv(), report(&rb).to_csv());
}

#[test]
fn failing_cells_are_recorded_without_aborting() {
    let dir = tempfile::tempdir().unwrap();
    let text = GRID.replace("variant = \"cmo\"", "variant = \"cmo\"\nbase_lr = 1e300");
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let summary = run(&cfg, &options(dir.path())).unwrap();
    assert_eq!(summary.failed, 2);
    assert_eq!(summary.manifest.failures(), 2);
    for r in &summary.manifest.records {
        match (&r.result, r.method.as_str()) {
            (CellResult::Completed { .. }, "ce") => {}
            (CellResult::Failed { error }, "cmo") => assert!(error.contains("epoch"), "{error}"),
            other => panic!("unexpected {other:?}"),
        }
    }
    let table = report(&summary.manifest);
    assert_eq!((table.rows[1].completed, table.rows[1].failed), (0, 2));
    assert!(table.rows[1].metrics.iter().all(Option::is_none));
}

#[test]
fn make_data_writes_datasets_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(GRID).unwrap();
    let sidecar = make_data(&cfg, Some(dir.path())).unwrap();
    let meta: DataManifest = serde_json::from_str(&fs::read_to_string(&sidecar).unwrap()).unwrap();
    let train = load_dataset(dir.path().join("data/train.cmo")).unwrap();
    let test = load_dataset(dir.path().join("data/test.cmo")).unwrap();
    let built = cfg.dataset.build().unwrap();
    assert_eq!(meta.hash, built.hash);
    assert_eq!(train.images(), built.train.images());
    assert_eq!(test.images(), built.test.images());
    assert_eq!(meta.images.len(), train.len() + test.len());
    assert_eq!(meta.histogram, train.histogram().counts());
}
