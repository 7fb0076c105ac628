use std::path::Path;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::to_input_size;
use crate::contrastive::ProjectionHead;
use crate::encoders::{EncoderBackendSpec, EncoderPair};
use crate::error::{Error, Result};
use crate::evaluation::TamperModel;
use crate::fusion::FusionBlock;
use crate::heads::{LocalisationHead, TamperMap};
use crate::imageops::hash_bytes;
use crate::impl_params;
use crate::nn::{NAdam, Pass};
use crate::patchgrid::PatchGrid;

/// Trainable parts: fusion block, projection head and localisation head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub fusion: FusionBlock,
    pub projection: ProjectionHead,
    pub head: LocalisationHead,
}

impl_params!(DetectorParams; fusion, projection, head);

pub(crate) fn derive_seed(seed: u64, tag: &str, extra: &[u64]) -> u64 {
    let mut parts: Vec<Vec<u8>> = vec![seed.to_le_bytes().to_vec(), tag.as_bytes().to_vec()];
    parts.extend(extra.iter().map(|e| e.to_le_bytes().to_vec()));
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    hash_bytes(&refs)
}

impl DetectorParams {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(DetectorParams {
            fusion: FusionBlock::new(
                config.fusion_params(),
                derive_seed(config.seed, "fusion", &[]),
            )?,
            projection: ProjectionHead::new(
                config.feature_dim,
                config.projection_hidden,
                config.embed_dim,
                config.normalize_embeddings,
                derive_seed(config.seed, "projection", &[]),
            ),
            head: LocalisationHead::new(config.feature_dim, derive_seed(config.seed, "head", &[])),
        })
    }

    /// Inference-mode tamper map from cached encoder features.
    pub fn map_from_features(
        &self,
        semantic: &Array2<f64>,
        geometry: &Array2<f64>,
        grid: &PatchGrid,
        target: (usize, usize),
    ) -> Result<Array2<f64>> {
        let (fx, _) = self.fusion.forward(semantic, geometry, &mut Pass::Eval)?;
        Ok(self.head.forward(&fx, grid, target)?.0)
    }
}

/// Trained model with its frozen encoders, ready for inference.
pub struct Detector {
    pub params: DetectorParams,
    pub encoders: EncoderPair,
    pub input_size: u32,
}

impl Detector {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let encoders = EncoderPair::from_specs(&ckpt.semantic_encoder, &ckpt.geometry_encoder)?;
        if encoders.checksum() != ckpt.encoder_checksum {
            return Err(Error::Configuration(
                "encoder parameters differ from the ones the checkpoint was trained with".into(),
            ));
        }
        Ok(Detector {
            params: ckpt.params.clone(),
            encoders,
            input_size: ckpt.config.input_size,
        })
    }
}

impl TamperModel for Detector {
    /// Resizes to the input resolution, encodes, fuses and localises; the
    /// map is upsampled to the size of the given image.
    fn predict(&self, image: &RgbImage) -> Result<TamperMap> {
        let input = to_input_size(image, self.input_size);
        let (fs, fg) = self.encoders.encode(&input)?;
        let target = (image.height() as usize, image.width() as usize);
        let map = self
            .params
            .map_from_features(&fs.features, &fg.features, &fs.grid, target)?;
        TamperMap::new(map)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_scl: f64,
    pub loss_loc: f64,
    pub val_auc: Option<f64>,
    pub val_iou: Option<f64>,
    /// Steps rejected for non-finite losses.
    pub rejected_steps: usize,
}

pub const METRICS_HEADER: &str = "epoch,loss_total,loss_scl,loss_loc,val_auc,val_iou";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.loss_total,
            self.loss_scl,
            self.loss_loc,
            opt(self.val_auc),
            opt(self.val_iou)
        )
    }
}

pub const CHECKPOINT_FORMAT: &str = "tamperscope-checkpoint/v1";

/// Single-file JSON checkpoint. Encoders are stored by spec only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub semantic_encoder: EncoderBackendSpec,
    pub geometry_encoder: EncoderBackendSpec,
    pub encoder_checksum: u64,
    pub params: DetectorParams,
    pub optimizer: NAdam,
    pub metrics: Vec<EpochMetrics>,
    /// Inference-mode loss on the validation groups after the last epoch.
    pub val_loss: Option<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!(
                "unknown checkpoint format {:?}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }
}
