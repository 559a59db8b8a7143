use std::fs;

use deepperson::data::{DatasetIndex, ImagePipeline, Normalization, SyntheticConfig};
use deepperson::model::{Branches, ModelConfig};
use deepperson::train::{
    run_training, Checkpoint, RunOptions, TrainConfig, BEST_CHECKPOINT, LATEST_CHECKPOINT,
    METRICS_LOG,
};
use deepperson::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset() -> DatasetIndex {
    let mut cfg = SyntheticConfig::new(4, 6);
    cfg.height = 64;
    cfg.width = 32;
    cfg.generate(&mut ChaCha8Rng::seed_from_u64(5))
        .unwrap()
        .with_held_in_split()
        .unwrap()
}

fn model_config() -> ModelConfig {
    ModelConfig {
        input_height: 32,
        input_width: 16,
        depth: 2,
        stage_convs: 1,
        base_width: 4,
        max_width: 8,
        channels: 8,
        hidden: 4,
        lstm_layers: 2,
        global_fc_dim: 6,
        num_classes: 4,
        branches: Branches::ALL,
        part_uses_lstm: true,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        p: 2,
        k: 2,
        epochs: 12,
        base_lr: 1e-3,
        decay_epoch: 8,
        seed: 9,
        eval_every: 4,
        pipeline: ImagePipeline::with_size(32, 16, Normalization::SYMMETRIC),
        augment: true,
        ..TrainConfig::default()
    }
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let index = dataset();
    let (mc, tc) = (model_config(), train_config());
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let opts = |dir: &std::path::Path| RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    };
    run_training(&index, &mc, &tc, &opts(whole.path())).unwrap();

    let stopped = run_training(
        &index,
        &mc,
        &tc,
        &RunOptions {
            stop_after_epoch: Some(10),
            ..opts(split.path())
        },
    )
    .unwrap();
    assert_eq!(stopped.state.epoch, 11);
    let resumed = run_training(
        &index,
        &mc,
        &tc,
        &RunOptions {
            resume: true,
            ..opts(split.path())
        },
    )
    .unwrap();
    assert_eq!(resumed.state.epoch, 12);

    let a = fs::read_to_string(whole.path().join(METRICS_LOG)).unwrap();
    let b = fs::read_to_string(split.path().join(METRICS_LOG)).unwrap();
    assert_eq!(a.lines().nth(11), b.lines().nth(11));
    assert_eq!(a, b);
    assert_eq!(
        fs::read(whole.path().join(LATEST_CHECKPOINT)).unwrap(),
        fs::read(split.path().join(LATEST_CHECKPOINT)).unwrap()
    );
}

#[test]
fn run_writes_one_metrics_line_per_epoch_and_both_checkpoints() {
    let index = dataset();
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        epochs: 4,
        decay_epoch: 2,
        ..train_config()
    };
    let out = run_training(
        &index,
        &model_config(),
        &tc,
        &RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let log = fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    for (e, line) in lines.iter().enumerate() {
        assert!(line.starts_with(&format!("epoch={e} lr=")), "{line}");
        for key in ["loss=", "loss_trp=", "loss_cls_p=", "loss_cls_g="] {
            assert!(line.contains(key), "{line}");
        }
    }
    assert!(lines[3].contains("mAP="));
    assert!(dir.path().join(BEST_CHECKPOINT).exists());
    let ck = Checkpoint::load(dir.path().join(LATEST_CHECKPOINT)).unwrap();
    let restored = ck.to_model().unwrap();
    assert_eq!(restored.params(), out.model.params());
    // 4 identities at P=2: two batches per epoch.
    assert_eq!(ck.state.unwrap().optimizer.step, 8);
}

#[test]
fn ablation_runs_report_disabled_terms_as_absent() {
    let index = dataset();
    let mc = ModelConfig {
        part_uses_lstm: false,
        branches: "global,ranking".parse().unwrap(),
        ..model_config()
    };
    let tc = TrainConfig {
        epochs: 2,
        decay_epoch: 1,
        ..train_config()
    };
    let out = run_training(&index, &mc, &tc, &RunOptions::default()).unwrap();
    let line = out.state.history[1].to_line();
    assert!(line.contains("loss_cls_p=na"), "{line}");
    assert!(!line.contains("loss_trp=na"), "{line}");
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let index = dataset();
    let mc = ModelConfig {
        num_classes: 5,
        ..model_config()
    };
    let err = run_training(&index, &mc, &train_config(), &RunOptions::default())
        .err()
        .unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
