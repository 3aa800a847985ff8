use std::path::Path;

use vaff::data::{Dataset, PhantomConfig};
use vaff::network::{load_checkpoint, InputMode, Topology};
use vaff::train::{
    checkpoint_name, evaluate, predict, read_log, synth, train, visualize, NetworkSection, TrainConfig, TrainOptions,
    FINAL_CHECKPOINT, LOG_FILE, MANIFEST_FILE, SEED_ENV,
};
use vaff::Error;

fn small_phantoms(root: &Path, count: usize) {
    synth(
        count,
        &PhantomConfig {
            image_size: (48, 48),
            faz_radius: 5.0,
            ..Default::default()
        },
        root,
    )
    .unwrap();
}

fn tiny_config(data: &Path, runs: &Path) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 2,
        lr_initial: 5e-3,
        seed: 11,
        dataset_root: data.into(),
        checkpoint_dir: runs.into(),
        checkpoint_every: 3,
        network: NetworkSection {
            topology: Topology::Reduced,
            n_ch: 4,
            gate_channels: 4,
            head_channels: 4,
            first_layer_init: None,
        },
        ..Default::default()
    }
}

#[test]
fn two_runs_with_one_seed_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_phantoms(&data, 2);
    let ds = Dataset::open(&data).unwrap();
    ds.write_split("train", &ds.split("all").unwrap()).unwrap();
    let run = |name: &str| {
        let cfg = TrainConfig {
            epochs: 50,
            checkpoint_every: 50,
            ..tiny_config(&data, &dir.path().join(name))
        };
        let out = train(&cfg, &TrainOptions::default()).unwrap();
        assert_eq!(out.epochs_completed, 50);
        let ckpt = load_checkpoint(&dir.path().join(name).join(FINAL_CHECKPOINT)).unwrap();
        (ckpt.tensors, ckpt.manifest.extra["progress"].clone(), out.records)
    };
    let (a, b) = (run("a"), run("b"));
    assert!(!a.0.is_empty());
    assert_eq!(a, b);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_phantoms(&data, 5);

    let full = tiny_config(&data, &dir.path().join("full"));
    let uninterrupted = train(&full, &TrainOptions::default()).unwrap();

    let split = tiny_config(&data, &dir.path().join("split"));
    let first = train(
        &split,
        &TrainOptions {
            stop_after_epoch: Some(3),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(first.epochs_completed, 3);
    assert_eq!(first.checkpoint, split.checkpoint_dir.join(checkpoint_name(3)));
    let resumed = train(
        &split,
        &TrainOptions {
            resume_from: Some(first.checkpoint.clone()),
            ..Default::default()
        },
    )
    .unwrap();

    let a = read_log(&full.checkpoint_dir.join(LOG_FILE)).unwrap();
    let b = read_log(&split.checkpoint_dir.join(LOG_FILE)).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a[3], b[3], "first record after the resume point");
    assert_eq!(a, b);
    assert_eq!(uninterrupted.records, resumed.records);
    let a = load_checkpoint(&full.checkpoint_dir.join(FINAL_CHECKPOINT)).unwrap();
    let b = load_checkpoint(&split.checkpoint_dir.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(a.tensors, b.tensors);
    assert_eq!(a.manifest.extra["progress"], b.manifest.extra["progress"]);
}

#[test]
fn log_records_follow_the_schedule_and_weights_sum_to_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_phantoms(&data, 5);
    let cfg = tiny_config(&data, &dir.path().join("run"));
    train(&cfg, &TrainOptions::default()).unwrap();
    let log = read_log(&cfg.checkpoint_dir.join(LOG_FILE)).unwrap();
    for (e, r) in log.iter().enumerate() {
        assert_eq!(r.epoch, e);
        assert!((r.lr - vaff::train::cosine_lr(cfg.lr_initial, e, cfg.epochs)).abs() < 1e-12);
        assert!((r.weights.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert!(r.task_losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    }
    assert_eq!(log[0].weights, vec![1.0; 3]);
    assert_eq!(log[1].weights, vec![1.0; 3]);
    assert!(cfg.checkpoint_dir.join(checkpoint_name(3)).exists());
    assert!(cfg.checkpoint_dir.join(checkpoint_name(6)).exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.checkpoint_dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["epochs"], 6);
}

#[test]
fn pipeline_from_synthesis_to_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_phantoms(&data, 5);
    let ds = Dataset::open(&data).unwrap();
    assert_eq!(ds.split("train").unwrap().len(), 4);
    assert_eq!(ds.split("test").unwrap().len(), 1);

    let runs = dir.path().join("runs");
    let cfg_path = dir.path().join("train.toml");
    std::fs::write(&cfg_path, tiny_config(&data, &runs).to_toml()).unwrap();
    let cfg = TrainConfig::load(&cfg_path).unwrap();
    let out = train(&cfg, &TrainOptions::default()).unwrap();

    let report = dir.path().join("report.csv");
    let params = cfg.eval_params();
    let rows = evaluate(&out.checkpoint, &data, "test", Some(InputMode::MultiEnface), &params, &report).unwrap();
    assert_eq!(rows.len(), 1);
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("sample,rv_dice,rv_bacc,faz_dice,faz_bacc"));
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("mean,") && lines[3].starts_with("std,"));
    let again = evaluate(&out.checkpoint, &data, "test", None, &params, &dir.path().join("again.csv")).unwrap();
    assert_eq!(rows, again);

    let sample = data.join(&ds.split("test").unwrap()[0]);
    let pred = dir.path().join("pred");
    predict(&out.checkpoint, &sample, &pred, &params).unwrap();
    for f in ["rv_prob.png", "faz_prob.png", "heatmap.png", "junctions.json"] {
        assert!(pred.join(f).is_file(), "{f} missing");
    }
    let overlay = dir.path().join("overlay.png");
    visualize(&sample, &pred, &overlay).unwrap();
    let img = image::open(&overlay).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (48, 48));
}

#[test]
fn evaluation_refuses_a_checkpoint_for_another_input_mode() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_phantoms(&data, 5);
    let cfg = TrainConfig {
        epochs: 1,
        input_mode: InputMode::SingleIvc,
        ..tiny_config(&data, &dir.path().join("run"))
    };
    let out = train(&cfg, &TrainOptions::default()).unwrap();
    let err = evaluate(
        &out.checkpoint,
        &data,
        "test",
        Some(InputMode::MultiEnface),
        &cfg.eval_params(),
        &dir.path().join("r.csv"),
    )
    .unwrap_err();
    assert!(matches!(err, Error::IncompatibleCheckpoint(_)), "{err}");
    assert_eq!(
        load_checkpoint(&out.checkpoint).unwrap().manifest.network.encoder.input_mode,
        InputMode::SingleIvc
    );
}

#[test]
fn empty_training_split_is_no_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_phantoms(&data, 2);
    Dataset::open(&data).unwrap().write_split("train", &[]).unwrap();
    let err = train(&tiny_config(&data, &dir.path().join("run")), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NoData(_)), "{err}");
    let err = train(
        &tiny_config(&dir.path().join("missing"), &dir.path().join("run")),
        &TrainOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NoData(_)), "{err}");
}

#[test]
fn divergence_aborts_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_phantoms(&data, 5);
    let cfg = TrainConfig {
        epochs: 50,
        checkpoint_every: 1,
        lr_initial: 1e38,
        augment: false,
        ..tiny_config(&data, &dir.path().join("run"))
    };
    let err = train(&cfg, &TrainOptions::default()).unwrap_err();
    let Error::NumericDivergence { epoch, .. } = err else {
        panic!("expected divergence, got {err}");
    };
    for done in 1..=epoch {
        assert!(cfg.checkpoint_dir.join(checkpoint_name(done)).exists());
    }
    assert!(!cfg.checkpoint_dir.join(checkpoint_name(epoch + 1)).exists());
    assert!(!cfg.checkpoint_dir.join(FINAL_CHECKPOINT).exists());
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "seed = 3\nepochs = 7\n").unwrap();
    std::env::set_var(SEED_ENV, "42");
    let cfg = TrainConfig::load(&path);
    std::env::remove_var(SEED_ENV);
    let cfg = cfg.unwrap();
    assert_eq!((cfg.seed, cfg.epochs), (42, 7));
    assert_eq!(TrainConfig::load(&path).unwrap().seed, 3);
}
