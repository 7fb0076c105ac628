use std::fs;

use image::RgbImage;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{modality_channels, patch_vectors, Encoder, EncoderBackendSpec, FeatureSequence};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::patchgrid::PatchGrid;

pub const BUNDLE_FORMAT: &str = "linear-patch-embed/v1";

/// Serialized feature-extractor bundle accepted through `weights_ref`.
///
/// JSON object with `format` = `"linear-patch-embed/v1"`, `patch_size`,
/// `feature_dim`, a row-major `weight` of shape (3·patch_size², feature_dim)
/// applied to zero-padded patch vectors (modality channels in [-0.5, 0.5]),
/// and a `bias` of length `feature_dim`. Foundation models run elsewhere
/// export their patch embedding in this form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearPatchBundle {
    pub format: String,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub struct PretrainedAdapter {
    spec: EncoderBackendSpec,
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl PretrainedAdapter {
    pub fn load(spec: EncoderBackendSpec) -> Result<Self> {
        let path = spec.weights_ref.clone().ok_or_else(|| {
            Error::Configuration("pretrained adapter requires weights_ref".into())
        })?;
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::Configuration(format!("cannot read weights {}: {e}", path.display()))
        })?;
        let bundle: LinearPatchBundle = serde_json::from_str(&text).map_err(|e| {
            Error::Configuration(format!("bad weights bundle {}: {e}", path.display()))
        })?;
        Self::from_bundle(spec, bundle)
    }

    pub fn from_bundle(spec: EncoderBackendSpec, bundle: LinearPatchBundle) -> Result<Self> {
        if bundle.format != BUNDLE_FORMAT {
            return Err(Error::Configuration(format!(
                "unsupported bundle format `{}`",
                bundle.format
            )));
        }
        if bundle.patch_size != spec.patch_size || bundle.feature_dim != spec.feature_dim {
            return Err(Error::Configuration(
                "bundle shape does not match encoder spec".into(),
            ));
        }
        let inputs = 3 * bundle.patch_size * bundle.patch_size;
        let weight = Array2::from_shape_vec((inputs, bundle.feature_dim), bundle.weight)
            .map_err(|e| Error::Configuration(format!("bundle weight: {e}")))?;
        if bundle.bias.len() != bundle.feature_dim {
            return Err(Error::Configuration("bundle bias length".into()));
        }
        Ok(PretrainedAdapter {
            spec,
            weight,
            bias: Array1::from(bundle.bias),
        })
    }
}

impl Encoder for PretrainedAdapter {
    fn spec(&self) -> &EncoderBackendSpec {
        &self.spec
    }

    fn encode(&self, image: &RgbImage) -> Result<FeatureSequence> {
        let grid = PatchGrid::new(
            image.height() as usize,
            image.width() as usize,
            self.spec.patch_size,
        )?;
        let patches = patch_vectors(&modality_channels(image, self.spec.modality), &grid);
        FeatureSequence::new(
            patches.dot(&self.weight) + &self.bias,
            grid,
            self.spec.modality,
        )
    }

    fn checksum(&self) -> u64 {
        self.weight.checksum() ^ self.bias.checksum().rotate_left(1)
    }
}
