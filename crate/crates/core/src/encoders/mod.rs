//! Frozen patch encoders producing the semantic and geometry feature
//! sequences.
//!
//! Three backend kinds are available: hand-crafted per-patch statistics,
//! a small randomly initialised patch transformer, and an adapter that loads
//! an externally supplied linear patch-embedding bundle. All of them are
//! immutable once built, so repeated encodes are bitwise identical.

mod adapter;
mod handcrafted;
mod toy;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use adapter::{LinearPatchBundle, PretrainedAdapter};
pub use handcrafted::{geometry_descriptors, semantic_descriptors, Handcrafted};
pub use toy::ToyTransformer;

use crate::error::{Error, Result};
use crate::imageops;
use crate::patchgrid::PatchGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Semantic,
    Geometry,
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    PretrainedAdapter,
    ToyTransformer,
    Handcrafted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderBackendSpec {
    pub kind: BackendKind,
    pub modality: Modality,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_ref: Option<PathBuf>,
}

impl EncoderBackendSpec {
    pub fn new(
        kind: BackendKind,
        modality: Modality,
        patch_size: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Self {
        EncoderBackendSpec {
            kind,
            modality,
            patch_size,
            feature_dim,
            seed,
            weights_ref: None,
        }
    }
}

/// N×D patch features on a known grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub features: Array2<f64>,
    pub grid: PatchGrid,
    pub modality: Modality,
}

impl FeatureSequence {
    pub fn new(features: Array2<f64>, grid: PatchGrid, modality: Modality) -> Result<Self> {
        if features.nrows() != grid.len() {
            return Err(Error::invalid(format!(
                "{} feature rows for a grid of {} patches",
                features.nrows(),
                grid.len()
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("feature sequence has non-finite entries"));
        }
        Ok(FeatureSequence {
            features,
            grid,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

pub trait Encoder: Send + Sync {
    fn spec(&self) -> &EncoderBackendSpec;

    fn encode(&self, image: &RgbImage) -> Result<FeatureSequence>;

    /// Checksum over every frozen parameter.
    fn checksum(&self) -> u64;
}

pub fn build_encoder(spec: &EncoderBackendSpec) -> Result<Arc<dyn Encoder>> {
    if spec.patch_size == 0 || spec.feature_dim == 0 {
        return Err(Error::Configuration(
            "patch size and feature dim must be positive".into(),
        ));
    }
    if spec.modality == Modality::Fused {
        return Err(Error::Configuration(
            "encoders produce semantic or geometry features".into(),
        ));
    }
    Ok(match spec.kind {
        BackendKind::Handcrafted => Arc::new(Handcrafted::new(spec.clone())),
        BackendKind::ToyTransformer => Arc::new(ToyTransformer::new(spec.clone())),
        BackendKind::PretrainedAdapter => Arc::new(PretrainedAdapter::load(spec.clone())?),
    })
}

/// Named encoder backends available to the model builder.
#[derive(Default)]
pub struct EncoderRegistry {
    entries: BTreeMap<String, Arc<dyn Encoder>>,
}

impl EncoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, spec: &EncoderBackendSpec) -> Result<Arc<dyn Encoder>> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!(
                "encoder `{name}` already registered"
            )));
        }
        let enc = build_encoder(spec)?;
        self.entries.insert(name.to_string(), enc.clone());
        Ok(enc)
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Encoder>> {
        self.entries.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// The semantic/geometry encoder pair of one model.
#[derive(Clone)]
pub struct EncoderPair {
    pub semantic: Arc<dyn Encoder>,
    pub geometry: Arc<dyn Encoder>,
}

impl EncoderPair {
    pub fn new(semantic: Arc<dyn Encoder>, geometry: Arc<dyn Encoder>) -> Result<Self> {
        let (s, g) = (semantic.spec(), geometry.spec());
        if s.feature_dim != g.feature_dim {
            return Err(Error::Configuration(format!(
                "semantic dim {} differs from geometry dim {}",
                s.feature_dim, g.feature_dim
            )));
        }
        if s.patch_size != g.patch_size {
            return Err(Error::Configuration(
                "encoders must share a patch size".into(),
            ));
        }
        Ok(EncoderPair { semantic, geometry })
    }

    pub fn from_specs(
        semantic: &EncoderBackendSpec,
        geometry: &EncoderBackendSpec,
    ) -> Result<Self> {
        Self::new(build_encoder(semantic)?, build_encoder(geometry)?)
    }

    pub fn encode(&self, image: &RgbImage) -> Result<(FeatureSequence, FeatureSequence)> {
        Ok((self.semantic.encode(image)?, self.geometry.encode(image)?))
    }

    pub fn feature_dim(&self) -> usize {
        self.semantic.spec().feature_dim
    }

    pub fn patch_size(&self) -> usize {
        self.semantic.spec().patch_size
    }

    pub fn checksum(&self) -> u64 {
        self.semantic.checksum() ^ self.geometry.checksum().rotate_left(17)
    }
}

/// Per-modality input channels, scaled to roughly unit range: centred RGB
/// for semantic encoders; centred luma plus absolute luma derivatives for
/// geometry encoders.
pub(crate) fn modality_channels(image: &RgbImage, modality: Modality) -> ndarray::Array3<f64> {
    let planes = imageops::to_planes(image);
    match modality {
        Modality::Geometry => {
            let l = imageops::luma(&planes);
            let (gr, gc) = imageops::gradients(&l);
            let (h, w) = l.dim();
            let mut out = ndarray::Array3::zeros((3, h, w));
            out.index_axis_mut(ndarray::Axis(0), 0)
                .assign(&l.mapv(|v| v / 255.0 - 0.5));
            out.index_axis_mut(ndarray::Axis(0), 1)
                .assign(&imageops::laplacian(&l).mapv(|v| v.abs() / 16.0));
            out.index_axis_mut(ndarray::Axis(0), 2)
                .assign(&(gr.mapv(|v| v * v) + gc.mapv(|v| v * v)).mapv(|v| v.sqrt() / 32.0));
            out
        }
        _ => planes.mapv(|v| v / 255.0 - 0.5),
    }
}

/// Flattened, zero-padded patch vectors (N × C·ps·ps).
pub(crate) fn patch_vectors(channels: &ndarray::Array3<f64>, grid: &PatchGrid) -> Array2<f64> {
    let c = channels.dim().0;
    let ps = grid.patch_size;
    let mut out = Array2::zeros((grid.len(), c * ps * ps));
    for n in 0..grid.len() {
        let (rr, cc) = grid.bounds(n);
        let mut row = out.row_mut(n);
        for ch in 0..c {
            for r in rr.clone() {
                for col in cc.clone() {
                    row[ch * ps * ps + (r - rr.start) * ps + (col - cc.start)] =
                        channels[[ch, r, col]];
                }
            }
        }
    }
    out
}
