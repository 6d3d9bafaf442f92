//! End-to-end runs of the harness at toy scale: config parsing, data,
//! training, checkpoints, evaluation, reports and manifest replay.

use std::path::{Path, PathBuf};

use leap_core::harness::{
    evaluate, load_models, prepare_datasets, replay, train_models, ExperimentSpec, HarnessError, MetricsReport,
    PropertyMode, REPORT_SCHEMA_VERSION,
};
use leap_core::model::save_checkpoint;

const TOY: &str = "
[env]
size = 6
obstacles = 2
[data]
demos = 16
seed = 5
[train]
layers = 1
heads = 2
embed_dim = 16
batch = 8
epochs = 2
grid = 6
seed = 3
[plan]
horizon = 4
iters = 3
[eval]
name = toy
episodes = 4
seeds = 1,2
";

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn train_toy(spec: &ExperimentSpec, dir: &Path) -> Vec<PathBuf> {
    let datasets = prepare_datasets(spec).unwrap();
    let trained = train_models(spec, &datasets, None).unwrap();
    trained
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let p = dir.join(format!("model{i}.ckpt"));
            save_checkpoint(m, &spec.train.digest(), spec.train.max_epochs, &p).unwrap();
            p
        })
        .collect()
}

#[test]
fn shipped_configs_parse_and_validate() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "ini") {
            ExperimentSpec::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 5);
    let comp = ExperimentSpec::load(&configs_dir().join("composition.ini")).unwrap();
    assert_eq!(comp.mode, PropertyMode::Composition);
}

#[test]
fn train_evaluate_and_replay_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::from_ini_str(TOY).unwrap();
    let paths = train_toy(&spec, dir.path());
    let report = evaluate(&spec, &paths).unwrap();
    report.validate().unwrap();
    assert_eq!(report.schema_version, REPORT_SCHEMA_VERSION);
    assert_eq!(report.per_seed.len(), 2);
    assert_eq!(report.per_seed.iter().map(|s| s.episodes).sum::<usize>(), 8);

    let again = replay(report.manifest.as_ref().unwrap()).unwrap();
    assert_eq!(report.to_json(), again.to_json());

    report.save(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.json")).unwrap();
    assert_eq!(MetricsReport::from_json(&text).unwrap(), report);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 1, "header, one row per seed, pooled row");
}

#[test]
fn retraining_with_the_same_seeds_reproduces_checkpoints() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::from_ini_str(TOY).unwrap();
    let pa = train_toy(&spec, a.path());
    let pb = train_toy(&spec, b.path());
    assert_eq!(std::fs::read(&pa[0]).unwrap(), std::fs::read(&pb[0]).unwrap());
}

#[test]
fn replay_refuses_changed_or_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::from_ini_str(TOY).unwrap();
    let paths = train_toy(&spec, dir.path());
    let manifest = evaluate(&spec, &paths).unwrap().manifest.unwrap();

    let mut bytes = std::fs::read(&paths[0]).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&paths[0], &bytes).unwrap();
    assert!(matches!(replay(&manifest), Err(HarnessError::Config(_))));

    std::fs::remove_file(&paths[0]).unwrap();
    assert!(matches!(replay(&manifest), Err(HarnessError::CheckpointMissing(_))));
    assert!(matches!(load_models(&paths), Err(HarnessError::CheckpointMissing(_))));
}

#[test]
fn composition_trains_one_model_per_obstacle_subset() {
    let mut spec = ExperimentSpec::from_ini_str(TOY).unwrap();
    spec.mode = PropertyMode::Composition;
    spec.env.obstacles = 4;
    let datasets = prepare_datasets(&spec).unwrap();
    assert_eq!(datasets.len(), 2);
    let trained = train_models(&spec, &datasets, None).unwrap();
    assert_eq!(trained.models.len(), 2);
}

#[test]
fn bad_configs_are_rejected_with_config_errors() {
    for text in [
        "[nope]\nx = 1\n",
        "[plan]\nplanner = annealing\n",
        "[eval]\nmode = generalization\n",
        "[plan]\nhorizon = 9\n",
    ] {
        assert!(ExperimentSpec::from_ini_str(text).is_err(), "{text:?}");
    }
}
