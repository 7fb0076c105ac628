use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::data::{split_manifest, EncodedDataset, EncodedGroup, EncodedImage};
use super::model::{
    derive_seed, Checkpoint, DetectorParams, EpochMetrics, CHECKPOINT_FORMAT, METRICS_HEADER,
};
use crate::contrastive::{collect_embeddings, supcon_loss_grad, ImageEmbeddings, SclMode};
use crate::datagen::{load_groups, DatasetManifest};
use crate::encoders::EncoderPair;
use crate::error::{Error, Result};
use crate::evaluation::{f1_iou, roc_auc};
use crate::heads::{detection_score, loc_loss_grad, TamperMap};
use crate::nn::{NAdam, Params, Pass};
use crate::patchgrid::PatchGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub loss_total: f64,
    pub loss_scl: f64,
    pub loss_loc: f64,
}

/// Full objective on one batch: the contrastive loss over all patch
/// embeddings of the batch plus the localisation loss summed over images.
/// Returns the losses and, with `want_grad`, the parameter gradients.
pub fn batch_objective(
    params: &DetectorParams,
    batch: &[&EncodedGroup],
    grid: &PatchGrid,
    config: &TrainConfig,
    pass: &mut Pass,
    scl_seed: u64,
    want_grad: bool,
) -> Result<(StepLosses, Option<DetectorParams>)> {
    let target = (grid.image_height, grid.image_width);
    let scl_on = config.ablation.scl_mode != SclMode::Off;
    let mut grads = want_grad.then(|| params.zeroed());
    let mut loss_loc = 0.0;

    struct Item<'a> {
        batch_item: usize,
        image: usize,
        encoded: &'a EncodedImage,
        fusion: crate::fusion::FusionCache,
        dfx: Option<Array2<f64>>,
        emb: Option<(Array2<f64>, crate::contrastive::ProjectionCache)>,
    }
    let mut items = Vec::new();
    for (b, group) in batch.iter().enumerate() {
        for (i, img) in group.images_for_k(config.k).iter().enumerate() {
            let (fx, fcache) = params.fusion.forward(&img.semantic, &img.geometry, pass)?;
            let (map, hcache) = params.head.forward(&fx, grid, target)?;
            let (ll, dmap) = loc_loss_grad(&map, &img.target)?;
            loss_loc += config.loc_weight * ll.total();
            let dfx = grads.as_mut().map(|g| {
                params
                    .head
                    .backward(&hcache, &(dmap * config.loc_weight), &mut g.head)
            });
            let emb = if scl_on {
                Some(params.projection.forward(&fx, pass)?)
            } else {
                None
            };
            items.push(Item {
                batch_item: b,
                image: i,
                encoded: img.as_ref(),
                fusion: fcache,
                dfx,
                emb,
            });
        }
    }

    let mut loss_scl = 0.0;
    if scl_on {
        let views: Vec<ImageEmbeddings> = items
            .iter()
            .map(|it| ImageEmbeddings {
                batch_item: it.batch_item,
                image: it.image,
                embeddings: &it.emb.as_ref().expect("embedding computed").0,
                labels: &it.encoded.labels,
            })
            .collect();
        let le = collect_embeddings(
            &views,
            Some(config.scl_cap),
            config.ablation.scl_mode,
            scl_seed,
        )?;
        if le.labels.len() >= 2 {
            let (l, dz) = supcon_loss_grad(&le.embeddings, &le.labels, config.temperature)?;
            loss_scl = config.scl_weight * l;
            if let Some(g) = grads.as_mut() {
                let mut per_item: Vec<Option<Array2<f64>>> = vec![None; items.len()];
                for (row, src) in le.source_index.iter().enumerate() {
                    let idx = items
                        .iter()
                        .position(|it| it.batch_item == src.batch_item && it.image == src.image)
                        .expect("row comes from the batch");
                    let slot = per_item[idx].get_or_insert_with(|| {
                        Array2::zeros((grid.len(), params.projection.embed_dim()))
                    });
                    slot.row_mut(src.patch)
                        .scaled_add(config.scl_weight, &dz.row(row));
                }
                for (it, dz_img) in items.iter_mut().zip(per_item) {
                    if let Some(dz_img) = dz_img {
                        let (_, pcache) = it.emb.as_ref().expect("embedding computed");
                        let dfx = params
                            .projection
                            .backward(pcache, &dz_img, &mut g.projection);
                        *it.dfx.as_mut().expect("gradient requested") += &dfx;
                    }
                }
            }
        }
    }

    if let Some(g) = grads.as_mut() {
        for it in &items {
            params.fusion.backward(
                &it.fusion,
                it.dfx.as_ref().expect("gradient requested"),
                &mut g.fusion,
            );
        }
    }
    let losses = StepLosses {
        loss_total: loss_scl + loss_loc,
        loss_scl,
        loss_loc,
    };
    Ok((losses, grads))
}

/// One optimiser update on the trainable parts. Non-finite losses or
/// gradients reject the step with a divergence error and leave the
/// parameters untouched.
pub fn train_step(
    params: &mut DetectorParams,
    optimizer: &mut NAdam,
    batch: &[&EncodedGroup],
    grid: &PatchGrid,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    scl_seed: u64,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (losses, grads) = batch_objective(
        params,
        batch,
        grid,
        config,
        &mut Pass::Train(rng),
        scl_seed,
        true,
    )?;
    let grads = grads.expect("gradient requested").flatten();
    if !losses.loss_total.is_finite() || !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::TrainingDivergence(format!(
            "non-finite step (loss_scl {}, loss_loc {})",
            losses.loss_scl, losses.loss_loc
        )));
    }
    let mut flat = params.flatten();
    optimizer.update(&mut flat, &grads);
    params.load_flat(&flat);
    Ok(losses)
}

/// Inference-mode objective averaged over batches of the groups.
pub fn evaluation_loss(
    params: &DetectorParams,
    groups: &[&EncodedGroup],
    grid: &PatchGrid,
    config: &TrainConfig,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::invalid("no groups to evaluate"));
    }
    let mut total = 0.0;
    let mut n = 0;
    for (i, batch) in groups.chunks(config.batch_size_groups).enumerate() {
        let seed = derive_seed(config.seed, "eval-scl", &[i as u64]);
        total += batch_objective(params, batch, grid, config, &mut Pass::Eval, seed, false)?
            .0
            .loss_total;
        n += 1;
    }
    Ok(total / n as f64)
}

/// Detection AUC (originals negative) and mean IoU over tampered images.
pub fn validation_metrics(
    params: &DetectorParams,
    groups: &[&EncodedGroup],
    grid: &PatchGrid,
    k: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    let target = (grid.image_height, grid.image_width);
    let mut seen = HashSet::new();
    let (mut scores, mut labels, mut ious) = (Vec::new(), Vec::new(), Vec::new());
    for g in groups {
        for img in g.images_for_k(k) {
            if !seen.insert(Arc::as_ptr(img)) {
                continue;
            }
            let map = TamperMap::new(params.map_from_features(
                &img.semantic,
                &img.geometry,
                grid,
                target,
            )?)?;
            scores.push(detection_score(&map));
            labels.push(img.tampered);
            if img.tampered {
                ious.push(f1_iou(&map, &img.target, 0.5)?.iou);
            }
        }
    }
    let auc = roc_auc(&scores, &labels).ok();
    let iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    Ok((auc, iou))
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs (simulates an interruption).
    pub stop_after_epoch: Option<usize>,
    /// Checkpoint written after every epoch.
    pub checkpoint_path: Option<PathBuf>,
    /// Metrics CSV, rewritten after every epoch.
    pub metrics_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Encoder checksum before training and after each epoch.
    pub encoder_checksums: Vec<u64>,
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for m in metrics {
        text.push_str(&m.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains on pre-encoded groups. `validation` may be empty.
pub fn train_encoded(
    config: &TrainConfig,
    encoders: &EncoderPair,
    training: &EncodedDataset,
    validation: &EncodedDataset,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_groups = training.select(config.ablation.mask_mode);
    if train_groups.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let val_groups = validation.select(config.ablation.mask_mode);
    let grid = training.grid;
    let (semantic_spec, geometry_spec) = (
        encoders.semantic.spec().clone(),
        encoders.geometry.spec().clone(),
    );
    let checksum = encoders.checksum();

    let (mut params, mut optimizer, mut metrics, start) = match options.resume {
        Some(ckpt) => {
            if ckpt.encoder_checksum != checksum {
                return Err(Error::Configuration(
                    "checkpoint was trained with different encoders".into(),
                ));
            }
            (ckpt.params, ckpt.optimizer, ckpt.metrics, ckpt.epoch)
        }
        None => {
            let params = DetectorParams::new(config)?;
            let mut opt = NAdam::new(
                params.num_params(),
                config.learning_rate,
                config.weight_decay,
            );
            opt.momentum_decay = config.momentum_decay;
            (params, opt, Vec::new(), 0)
        }
    };
    let end = options
        .stop_after_epoch
        .map_or(config.epochs, |s| s.min(config.epochs));
    let mut checksums = vec![checksum];
    let mut checkpoint = None;

    for epoch in start..end {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "epoch", &[epoch as u64]));
        let mut order: Vec<&EncodedGroup> = train_groups.clone();
        order.shuffle(&mut rng);
        let (mut sum, mut steps, mut rejected) = (StepLosses::default(), 0usize, 0usize);
        for (step, batch) in order.chunks(config.batch_size_groups).enumerate() {
            let scl_seed = derive_seed(config.seed, "scl", &[epoch as u64, step as u64]);
            match train_step(
                &mut params,
                &mut optimizer,
                batch,
                &grid,
                config,
                &mut rng,
                scl_seed,
            ) {
                Ok(l) => {
                    sum.loss_total += l.loss_total;
                    sum.loss_scl += l.loss_scl;
                    sum.loss_loc += l.loss_loc;
                    steps += 1;
                }
                Err(Error::TrainingDivergence(msg)) => {
                    warn!("epoch {epoch} step {step} rejected: {msg}");
                    rejected += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if steps == 0 {
            return Err(Error::TrainingDivergence(format!(
                "every step of epoch {epoch} was non-finite"
            )));
        }
        let now = encoders.checksum();
        checksums.push(now);
        if now != checksum {
            return Err(Error::Validation(
                "encoder parameters changed during training".into(),
            ));
        }
        let (val_auc, val_iou) = if val_groups.is_empty() {
            (None, None)
        } else {
            validation_metrics(&params, &val_groups, &grid, config.k)?
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss_total: sum.loss_total / steps as f64,
            loss_scl: sum.loss_scl / steps as f64,
            loss_loc: sum.loss_loc / steps as f64,
            val_auc,
            val_iou,
            rejected_steps: rejected,
        };
        info!("{}", m.csv_row());
        metrics.push(m);
        let val_loss = if val_groups.is_empty() {
            None
        } else {
            Some(evaluation_loss(&params, &val_groups, &grid, config)?)
        };
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            epoch: epoch + 1,
            config: config.clone(),
            semantic_encoder: semantic_spec.clone(),
            geometry_encoder: geometry_spec.clone(),
            encoder_checksum: checksum,
            params: params.clone(),
            optimizer: optimizer.clone(),
            metrics: metrics.clone(),
            val_loss,
        };
        if let Some(p) = &options.checkpoint_path {
            ckpt.save(p)?;
        }
        if let Some(p) = &options.metrics_path {
            write_metrics(p, &metrics)?;
        }
        checkpoint = Some(ckpt);
    }
    let checkpoint = checkpoint.ok_or_else(|| Error::invalid("no epoch left to run"))?;
    Ok(TrainOutcome {
        checkpoint,
        encoder_checksums: checksums,
    })
}

/// Loaded and encoded training/validation data for a configuration.
pub struct PreparedData {
    pub encoders: EncoderPair,
    pub training: EncodedDataset,
    pub validation: EncodedDataset,
}

impl PreparedData {
    /// Splits the manifest entries, loads the groups and encodes them.
    pub fn from_manifest(
        config: &TrainConfig,
        manifest: &DatasetManifest,
        base: &Path,
    ) -> Result<Self> {
        config.validate()?;
        let (train_m, val_m) = split_manifest(
            manifest,
            config.val_fraction,
            derive_seed(config.seed, "split", &[]),
        );
        if train_m.entries.is_empty() {
            return Err(Error::invalid("dataset has no tampered images"));
        }
        let (s, g) = config.encoder_specs();
        let encoders = EncoderPair::from_specs(&s, &g)?;
        let training =
            EncodedDataset::encode(&load_groups(&train_m, base)?, &encoders, config.input_size)?;
        let validation =
            EncodedDataset::encode(&load_groups(&val_m, base)?, &encoders, config.input_size)?;
        Ok(PreparedData {
            encoders,
            training,
            validation,
        })
    }
}

pub fn train(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    base: &Path,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    let data = PreparedData::from_manifest(config, manifest, base)?;
    train_encoded(
        config,
        &data.encoders,
        &data.training,
        &data.validation,
        options,
    )
}
