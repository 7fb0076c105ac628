mod common;

use common::{build_dataset, tiny_config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tamperscope::contrastive::SclMode;
use tamperscope::datagen::DatasetManifest;
use tamperscope::error::Error;
use tamperscope::nn::{NAdam, Params, Pass};
use tamperscope::patchgrid::PatchClass;
use tamperscope::training::{
    evaluation_loss, train, train_encoded, train_step, Checkpoint, DetectorParams, EncodedGroup,
    PreparedData, TrainConfig, TrainOptions, METRICS_HEADER,
};

fn prepared(count: usize, config: &TrainConfig) -> (tempfile::TempDir, PreparedData) {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, base) = build_dataset(tmp.path(), count, 32, 2, 5);
    let data = PreparedData::from_manifest(config, &manifest, &base).unwrap();
    (tmp, data)
}

fn batch(data: &PreparedData, n: usize) -> Vec<&EncodedGroup> {
    data.training.groups.iter().take(n).collect()
}

#[test]
fn disabled_contrastive_term_leaves_only_localisation_loss() {
    let mut config = tiny_config();
    config.ablation.scl_mode = SclMode::Off;
    let (_tmp, data) = prepared(6, &config);
    let mut params = DetectorParams::new(&config).unwrap();
    let mut opt = NAdam::new(
        params.num_params(),
        config.learning_rate,
        config.weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = train_step(
        &mut params,
        &mut opt,
        &batch(&data, 2),
        &data.training.grid,
        &config,
        &mut rng,
        1,
    )
    .unwrap();
    assert_eq!(l.loss_scl, 0.0);
    assert_eq!(l.loss_total, l.loss_loc);
}

#[test]
fn total_loss_is_the_exact_sum_of_its_parts() {
    let config = tiny_config();
    let (_tmp, data) = prepared(6, &config);
    let mut params = DetectorParams::new(&config).unwrap();
    let mut opt = NAdam::new(
        params.num_params(),
        config.learning_rate,
        config.weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = train_step(
        &mut params,
        &mut opt,
        &batch(&data, 2),
        &data.training.grid,
        &config,
        &mut rng,
        1,
    )
    .unwrap();
    assert!(l.loss_scl > 0.0);
    assert_eq!(l.loss_total, l.loss_scl + l.loss_loc);
}

#[test]
fn non_finite_parameters_reject_the_step_untouched() {
    let config = tiny_config();
    let (_tmp, data) = prepared(6, &config);
    let mut params = DetectorParams::new(&config).unwrap();
    params.head.bias[0] = f64::NAN;
    let before = params.flatten();
    let mut opt = NAdam::new(
        params.num_params(),
        config.learning_rate,
        config.weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = train_step(
        &mut params,
        &mut opt,
        &batch(&data, 2),
        &data.training.grid,
        &config,
        &mut rng,
        1,
    );
    assert!(matches!(err, Err(Error::TrainingDivergence(_))));
    let after = params.flatten();
    assert_eq!(before.len(), after.len());
    assert!(before
        .iter()
        .zip(&after)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn frozen_encoders_keep_their_checksum() {
    let config = TrainConfig {
        epochs: 5,
        ..tiny_config()
    };
    let (_tmp, data) = prepared(8, &config);
    let out = train_encoded(
        &config,
        &data.encoders,
        &data.training,
        &data.validation,
        TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(out.encoder_checksums.len(), 6);
    assert!(out
        .encoder_checksums
        .iter()
        .all(|&c| c == out.encoder_checksums[0]));
    assert_eq!(out.checkpoint.encoder_checksum, data.encoders.checksum());
}

#[test]
fn same_seed_gives_identical_trajectories() {
    let config = tiny_config();
    let (_tmp, data) = prepared(8, &config);
    let run = || {
        train_encoded(
            &config,
            &data.encoders,
            &data.training,
            &data.validation,
            TrainOptions::default(),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.checkpoint.metrics, b.checkpoint.metrics);
    assert_eq!(a.checkpoint.params.flatten(), b.checkpoint.params.flatten());

    let other = TrainConfig {
        seed: 9,
        ..config.clone()
    };
    let c = train_encoded(
        &other,
        &data.encoders,
        &data.training,
        &data.validation,
        TrainOptions::default(),
    )
    .unwrap();
    assert_ne!(a.checkpoint.params.flatten(), c.checkpoint.params.flatten());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let config = TrainConfig {
        epochs: 4,
        ..tiny_config()
    };
    let (tmp, data) = prepared(8, &config);
    let full = train_encoded(
        &config,
        &data.encoders,
        &data.training,
        &data.validation,
        TrainOptions::default(),
    )
    .unwrap();

    let path = tmp.path().join("ckpt.json");
    let first = TrainOptions {
        stop_after_epoch: Some(2),
        checkpoint_path: Some(path.clone()),
        ..TrainOptions::default()
    };
    let partial = train_encoded(
        &config,
        &data.encoders,
        &data.training,
        &data.validation,
        first,
    )
    .unwrap();
    assert_eq!(partial.checkpoint.epoch, 2);
    let resume = TrainOptions {
        resume: Some(Checkpoint::load(&path).unwrap()),
        ..TrainOptions::default()
    };
    let resumed = train_encoded(
        &config,
        &data.encoders,
        &data.training,
        &data.validation,
        resume,
    )
    .unwrap();
    assert_eq!(resumed.checkpoint.epoch, 4);
    assert_eq!(resumed.checkpoint.metrics, full.checkpoint.metrics);
    assert_eq!(
        resumed.checkpoint.params.flatten(),
        full.checkpoint.params.flatten()
    );
}

#[test]
fn resume_with_other_encoders_is_rejected() {
    let config = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let (_tmp, data) = prepared(6, &config);
    let out = train_encoded(
        &config,
        &data.encoders,
        &data.training,
        &data.validation,
        TrainOptions::default(),
    )
    .unwrap();
    let mut ckpt = out.checkpoint;
    ckpt.encoder_checksum ^= 1;
    let again = TrainConfig {
        epochs: 2,
        ..config
    };
    let opts = TrainOptions {
        resume: Some(ckpt),
        ..TrainOptions::default()
    };
    let err = train_encoded(
        &again,
        &data.encoders,
        &data.training,
        &data.validation,
        opts,
    );
    assert!(matches!(err, Err(Error::Configuration(_))));
}

#[test]
fn one_epoch_on_four_groups_writes_checkpoint_and_one_log_row() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, base) = build_dataset(&tmp.path().join("data"), 4, 32, 2, 3);
    let config = TrainConfig {
        epochs: 1,
        val_fraction: 0.0,
        ..tiny_config()
    };
    let ckpt_path = tmp.path().join("out/checkpoint.json");
    let log_path = tmp.path().join("out/metrics.csv");
    std::fs::create_dir_all(tmp.path().join("out")).unwrap();
    let out = train(
        &config,
        &manifest,
        &base,
        TrainOptions {
            checkpoint_path: Some(ckpt_path.clone()),
            metrics_path: Some(log_path.clone()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(out.checkpoint.epoch, 1);
    assert!(ckpt_path.is_file());
    let log = std::fs::read_to_string(&log_path).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], METRICS_HEADER);
    assert!(lines[1].starts_with("1,"));
    assert_eq!(lines[1].split(',').count(), 6);
}

#[test]
fn empty_dataset_is_an_invalid_argument() {
    let tmp = tempfile::tempdir().unwrap();
    let err = train(
        &tiny_config(),
        &DatasetManifest::default(),
        tmp.path(),
        TrainOptions::default(),
    );
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn checkpoint_reload_reproduces_validation_loss() {
    let config = TrainConfig {
        epochs: 2,
        ..tiny_config()
    };
    let (tmp, data) = prepared(8, &config);
    assert!(!data.validation.is_empty());
    let path = tmp.path().join("ckpt.json");
    let opts = TrainOptions {
        checkpoint_path: Some(path.clone()),
        ..TrainOptions::default()
    };
    let out = train_encoded(
        &config,
        &data.encoders,
        &data.training,
        &data.validation,
        opts,
    )
    .unwrap();
    let recorded = out.checkpoint.val_loss.unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let groups = data.validation.select(config.ablation.mask_mode);
    let again = evaluation_loss(
        &loaded.params,
        &groups,
        &data.validation.grid,
        &loaded.config,
    )
    .unwrap();
    assert!((again - recorded).abs() <= 1e-6, "{again} vs {recorded}");
}

#[test]
fn loss_decreases_monotonically_without_contrastive_term() {
    let mut config = TrainConfig {
        epochs: 10,
        dropout_rate: 0.0,
        batch_size_groups: 64,
        val_fraction: 0.0,
        ..tiny_config()
    };
    config.ablation.scl_mode = SclMode::Off;
    config.ablation.encoder_mode = tamperscope::encoders::BackendKind::Handcrafted;
    let (_tmp, data) = prepared(8, &config);
    let out = train_encoded(
        &config,
        &data.encoders,
        &data.training,
        &data.validation,
        TrainOptions::default(),
    )
    .unwrap();
    let losses: Vec<f64> = out
        .checkpoint
        .metrics
        .iter()
        .map(|m| m.loss_total)
        .collect();
    assert_eq!(losses.len(), 10);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

fn mean_cosines(params: &DetectorParams, groups: &[&EncodedGroup], k: usize) -> (f64, f64) {
    let mut rows = Vec::new();
    for g in groups {
        for img in g.images_for_k(k) {
            let (fx, _) = params
                .fusion
                .forward(&img.semantic, &img.geometry, &mut Pass::Eval)
                .unwrap();
            let (z, _) = params.projection.forward(&fx, &mut Pass::Eval).unwrap();
            for (p, &c) in img.labels.labels.iter().enumerate() {
                rows.push((z.row(p).to_owned(), c));
            }
        }
    }
    let (mut intra, mut inter, mut ni, mut ne) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let (a, b) = (&rows[i].0, &rows[j].0);
            let cos = a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt());
            if rows[i].1 == rows[j].1 {
                intra += cos;
                ni += 1;
            } else {
                inter += cos;
                ne += 1;
            }
        }
    }
    (intra / ni as f64, inter / ne as f64)
}

#[test]
fn contrastive_training_clusters_held_out_embeddings() {
    let config = TrainConfig {
        epochs: 8,
        temperature: 0.1,
        ..tiny_config()
    };
    let (_tmp, data) = prepared(16, &config);
    let val = data.validation.select(config.ablation.mask_mode);
    assert!(!val.is_empty());
    let classes: std::collections::HashSet<PatchClass> = val
        .iter()
        .flat_map(|g| {
            g.images_for_k(config.k)
                .iter()
                .flat_map(|i| i.labels.labels.clone())
        })
        .collect();
    assert!(classes.len() >= 2);
    let out = train_encoded(
        &config,
        &data.encoders,
        &data.training,
        &data.validation,
        TrainOptions::default(),
    )
    .unwrap();
    let (intra, inter) = mean_cosines(&out.checkpoint.params, &val, config.k);
    assert!(intra > inter, "intra {intra} inter {inter}");
}
