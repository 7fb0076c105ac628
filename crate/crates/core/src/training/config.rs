use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::SclMode;
use crate::encoders::{BackendKind, EncoderBackendSpec, Modality};
use crate::error::{Error, Result};
use crate::fusion::{AttentionConvention, FusionMode, FusionParams};

/// Which sample groups enter training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    Mixed,
    SemanticOnly,
    RandomOnly,
}

impl MaskMode {
    pub fn accepts(self, random_mask: bool) -> bool {
        match self {
            MaskMode::Mixed => true,
            MaskMode::SemanticOnly => !random_mask,
            MaskMode::RandomOnly => random_mask,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub fusion_mode: FusionMode,
    pub scl_mode: SclMode,
    /// Backend kind used for both frozen encoders.
    pub encoder_mode: BackendKind,
    pub mask_mode: MaskMode,
    pub attention_convention: AttentionConvention,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            fusion_mode: FusionMode::CrossAttention,
            scl_mode: SclMode::On,
            encoder_mode: BackendKind::ToyTransformer,
            mask_mode: MaskMode::Mixed,
            attention_convention: AttentionConvention::AsWritten,
        }
    }
}

/// Training configuration. Serialised as TOML: flat keys plus an
/// `[ablation]` table. Missing keys take the [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size_groups: usize,
    pub learning_rate: f64,
    /// L2 weight decay of the optimiser.
    pub weight_decay: f64,
    pub momentum_decay: f64,
    pub dropout_rate: f64,
    /// Inpainters per group; groups keep their first `k` tampered images.
    pub k: usize,
    /// Images are resized to `input_size`² before encoding.
    pub input_size: u32,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    pub projection_hidden: usize,
    pub temperature: f64,
    pub normalize_embeddings: bool,
    /// Per-class cap on contrastive rows per batch.
    pub scl_cap: usize,
    pub scl_weight: f64,
    pub loc_weight: f64,
    pub val_fraction: f64,
    pub encoder_seed: u64,
    pub semantic_weights: Option<PathBuf>,
    pub geometry_weights: Option<PathBuf>,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 120,
            batch_size_groups: 16,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            momentum_decay: 4e-3,
            dropout_rate: 0.1,
            k: 2,
            input_size: 224,
            patch_size: 16,
            feature_dim: 64,
            num_heads: 8,
            mlp_hidden: 128,
            embed_dim: 32,
            projection_hidden: 64,
            temperature: 1.0,
            normalize_embeddings: true,
            scl_cap: 1024,
            scl_weight: 1.0,
            loc_weight: 1.0,
            val_fraction: 0.1,
            encoder_seed: 1,
            semantic_weights: None,
            geometry_weights: None,
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Configuration(msg));
        if self.batch_size_groups == 0 {
            return bad("batch_size_groups must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.input_size == 0 || self.patch_size == 0 {
            return bad("input_size and patch_size must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.scl_weight < 0.0 || self.loc_weight < 0.0 {
            return bad("weight_decay and loss weights must be non-negative".into());
        }
        if self.scl_cap == 0
            || self.embed_dim == 0
            || self.projection_hidden == 0
            || self.mlp_hidden == 0
        {
            return bad(
                "scl_cap, embed_dim, projection_hidden and mlp_hidden must be positive".into(),
            );
        }
        self.fusion_params()
            .validate()
            .map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams {
            num_heads: self.num_heads,
            feature_dim: self.feature_dim,
            mlp_hidden: self.mlp_hidden,
            dropout_rate: self.dropout_rate,
            mode: self.ablation.fusion_mode,
            attention_convention: self.ablation.attention_convention,
        }
    }

    pub fn encoder_specs(&self) -> (EncoderBackendSpec, EncoderBackendSpec) {
        let spec = |modality, seed, weights: &Option<PathBuf>| EncoderBackendSpec {
            weights_ref: weights.clone(),
            ..EncoderBackendSpec::new(
                self.ablation.encoder_mode,
                modality,
                self.patch_size,
                self.feature_dim,
                seed,
            )
        };
        (
            spec(
                Modality::Semantic,
                self.encoder_seed,
                &self.semantic_weights,
            ),
            spec(
                Modality::Geometry,
                self.encoder_seed.wrapping_add(1),
                &self.geometry_weights,
            ),
        )
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_with_ablation_table() {
        let mut c = TrainConfig::default();
        c.ablation.scl_mode = SclMode::AffectedAsOriginal;
        c.ablation.fusion_mode = FusionMode::Sum;
        c.semantic_weights = Some("w.json".into());
        let text = c.to_toml().unwrap();
        assert!(text.contains("[ablation]"));
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let c = TrainConfig::from_toml("epochs = 3\n[ablation]\nmask_mode = \"random-only\"\n")
            .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.ablation.mask_mode, MaskMode::RandomOnly);
        assert_eq!(c.batch_size_groups, 16);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(
            TrainConfig::from_toml("bogus = 1"),
            Err(Error::Parse(_))
        ));
        assert!(TrainConfig::from_toml("k = 0").is_err());
        assert!(TrainConfig::from_toml("batch_size_groups = 0").is_err());
        assert!(TrainConfig::from_toml("learning_rate = 0.0").is_err());
        assert!(TrainConfig::from_toml("feature_dim = 60").is_err());
    }
}
