//! Frozen-encoder feature cache. Encoders never change during training, so
//! every image is encoded once up front.

use std::collections::HashMap;
use std::sync::Arc;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::MaskMode;
use crate::datagen::{DatasetManifest, SampleGroup};
use crate::encoders::EncoderPair;
use crate::error::{Error, Result};
use crate::imageops::image_hash;
use crate::mask::Mask;
use crate::patchgrid::{classify_patches, PatchGrid, PatchLabels};

/// Resizes to `size`² unless the image already has that size.
pub fn to_input_size(image: &RgbImage, size: u32) -> RgbImage {
    if image.dimensions() == (size, size) {
        image.clone()
    } else {
        image::imageops::resize(image, size, size, FilterType::Triangle)
    }
}

/// Encoder outputs and supervision for one image at input resolution.
#[derive(Debug)]
pub struct EncodedImage {
    pub semantic: Array2<f64>,
    pub geometry: Array2<f64>,
    pub labels: PatchLabels,
    /// Pixel target; all zero for originals.
    pub target: Mask,
    pub tampered: bool,
}

#[derive(Clone, Debug)]
pub struct EncodedGroup {
    /// Original first, then the tampered images in inpainter order.
    pub images: Vec<Arc<EncodedImage>>,
    pub inpainter_ids: Vec<String>,
    pub random_mask: bool,
}

impl EncodedGroup {
    /// Original plus the first `k` tampered images.
    pub fn images_for_k(&self, k: usize) -> &[Arc<EncodedImage>] {
        &self.images[..(k + 1).min(self.images.len())]
    }
}

#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub grid: PatchGrid,
    pub groups: Vec<EncodedGroup>,
}

impl EncodedDataset {
    /// Encodes every image of every group. Originals shared between groups
    /// are encoded once.
    pub fn encode(groups: &[SampleGroup], encoders: &EncoderPair, input_size: u32) -> Result<Self> {
        let grid = PatchGrid::new(
            input_size as usize,
            input_size as usize,
            encoders.patch_size(),
        )?;
        let side = input_size as usize;
        let mut originals: HashMap<u64, Arc<EncodedImage>> = HashMap::new();
        let encode = |img: &RgbImage, target: Mask, tampered: bool| -> Result<EncodedImage> {
            let img = to_input_size(img, input_size);
            let (fs, fg) = encoders.encode(&img)?;
            if fs.grid != grid {
                return Err(Error::invalid("encoder grid differs from the input grid"));
            }
            Ok(EncodedImage {
                labels: classify_patches(&grid, &target, tampered)?,
                semantic: fs.features,
                geometry: fg.features,
                target,
                tampered,
            })
        };
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            g.validate()?;
            let key = image_hash(&g.original_image);
            let original = match originals.get(&key) {
                Some(o) => o.clone(),
                None => {
                    let o = Arc::new(encode(&g.original_image, Mask::zeros(side, side), false)?);
                    originals.insert(key, o.clone());
                    o
                }
            };
            let mask = g.mask.resize_nearest(side, side);
            let mut images = vec![original];
            for t in &g.tampered_images {
                images.push(Arc::new(encode(t, mask.clone(), true)?));
            }
            out.push(EncodedGroup {
                images,
                inpainter_ids: g.inpainter_ids.clone(),
                random_mask: g.random_mask,
            });
        }
        Ok(EncodedDataset { grid, groups: out })
    }

    /// Groups admitted by `mode`.
    pub fn select(&self, mode: MaskMode) -> Vec<&EncodedGroup> {
        self.groups
            .iter()
            .filter(|g| mode.accepts(g.random_mask))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Seeded split of the manifest entries (source images) into training and
/// validation parts. Both groups of an image land on the same side.
pub fn split_manifest(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> (DatasetManifest, DatasetManifest) {
    let usable: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| !manifest.entries[i].tampered.is_empty())
        .collect();
    let mut order = usable.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (val_fraction * usable.len() as f64).round() as usize;
    if val_fraction > 0.0 && usable.len() >= 2 {
        n_val = n_val.clamp(1, usable.len() - 1);
    }
    let val: std::collections::HashSet<usize> = order[..n_val].iter().copied().collect();
    let pick = |in_val: bool| DatasetManifest {
        entries: usable
            .iter()
            .filter(|i| val.contains(i) == in_val)
            .map(|&i| manifest.entries[i].clone())
            .collect(),
    };
    (pick(false), pick(true))
}
