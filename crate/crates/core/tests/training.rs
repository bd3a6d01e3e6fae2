use std::fs;
use std::path::Path;

use dvsm::model::{Model, ModelConfig};
use dvsm::scenes::{make_dataset, DatasetConfig, SceneDataset};
use dvsm::train::{checkpoint_path, run_training, Phase, RunOptions, TrainConfig, FINAL_CHECKPOINT, METRICS_FILE, METRICS_HEADER};

fn dataset(dir: &Path) -> SceneDataset {
    make_dataset(&DatasetConfig::new(2, 16, &[8, 16], 5), dir).unwrap()
}

fn model_cfg() -> ModelConfig {
    ModelConfig::new(16, 1, 2, 4, 4)
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        curriculum: vec![Phase { resolution: 8, steps: 3 }, Phase { resolution: 16, steps: 3 }],
        context_views: vec![2, 3],
        skip_min: 1,
        skip_max: 4,
        target_views: 1,
        warmup: 2,
        checkpoint_interval: 2,
        seed: 9,
        log_wallclock: false,
        ..TrainConfig::default()
    }
}

fn losses(csv: &str) -> Vec<f64> {
    csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect()
}

#[test]
fn phases_checkpoints_and_log_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"));
    let out = tmp.path().join("run");
    let tc = train_cfg();
    let r = run_training(&tc, &ds, &model_cfg(), &out, &RunOptions::default()).unwrap();
    assert_eq!(r.steps_done, 6);
    let csv = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 7);
    let phases: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(phases, ["0", "0", "0", "1", "1", "1"]);
    let ckpts: Vec<_> = [2, 3, 4, 6].iter().map(|&s| checkpoint_path(&out, s)).collect();
    assert_eq!(r.checkpoints, ckpts);
    assert!(ckpts.iter().all(|p| p.exists()));
    let last = Model::<f32>::load(&out.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(last.weights, r.model.weights);
    assert!(lines[1..].iter().all(|l| l.ends_with(",0.000")));
}

#[test]
fn identical_seed_reproduces_metrics_bytewise() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"));
    let tc = train_cfg();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_training(&tc, &ds, &model_cfg(), &a, &RunOptions::default()).unwrap();
    run_training(&tc, &ds, &model_cfg(), &b, &RunOptions::default()).unwrap();
    let (ca, cb) = (fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(b.join(METRICS_FILE)).unwrap());
    assert_eq!(ca, cb);
    assert_eq!(fs::read(a.join(FINAL_CHECKPOINT)).unwrap(), fs::read(b.join(FINAL_CHECKPOINT)).unwrap());
    let other = TrainConfig { seed: 10, ..train_cfg() };
    let c = tmp.path().join("c");
    run_training(&other, &ds, &model_cfg(), &c, &RunOptions::default()).unwrap();
    assert_ne!(ca, fs::read(c.join(METRICS_FILE)).unwrap());
}

#[test]
fn resume_matches_the_continued_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"));
    let tc = train_cfg();
    let full = tmp.path().join("full");
    run_training(&tc, &ds, &model_cfg(), &full, &RunOptions::default()).unwrap();
    let reference = losses(&fs::read_to_string(full.join(METRICS_FILE)).unwrap());

    let split = tmp.path().join("split");
    let stop = RunOptions {
        stop_after: Some(3),
        ..RunOptions::default()
    };
    let first = run_training(&tc, &ds, &model_cfg(), &split, &stop).unwrap();
    assert_eq!(first.steps_done, 3);
    assert!(!split.join(FINAL_CHECKPOINT).exists());
    let resume = RunOptions {
        resume: Some(checkpoint_path(&split, 3)),
        ..RunOptions::default()
    };
    let second = run_training(&tc, &ds, &model_cfg(), &split, &resume).unwrap();
    assert_eq!(second.history.len(), 3);
    assert!((second.history[0].loss - reference[3]).abs() <= 1e-6);
    let resumed = losses(&fs::read_to_string(split.join(METRICS_FILE)).unwrap());
    assert_eq!(resumed.len(), reference.len());
    for (x, y) in resumed.iter().zip(&reference) {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
    }
}

#[test]
fn resume_rejects_a_different_model() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"));
    let tc = train_cfg();
    let out = tmp.path().join("run");
    let stop = RunOptions {
        stop_after: Some(2),
        ..RunOptions::default()
    };
    run_training(&tc, &ds, &model_cfg(), &out, &stop).unwrap();
    let resume = RunOptions {
        resume: Some(checkpoint_path(&out, 2)),
        ..RunOptions::default()
    };
    let other = ModelConfig::new(32, 1, 2, 4, 4);
    assert!(run_training(&tc, &ds, &other, &out, &resume).is_err());
}

#[test]
fn unknown_curriculum_resolution_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("data"));
    let tc = TrainConfig {
        curriculum: vec![Phase { resolution: 32, steps: 4 }],
        ..train_cfg()
    };
    let err = run_training(&tc, &ds, &model_cfg(), &tmp.path().join("x"), &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("resolution"), "{err}");
}
