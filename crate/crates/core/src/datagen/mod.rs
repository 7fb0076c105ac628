//! Sample-group construction: object proposal and segmentation clients,
//! pseudo-inpainters, and the dataset manifest.

mod clients;
mod manifest;
mod pipeline;
mod pseudo;
mod scene;

pub use clients::{
    longest_edge_size, HttpClient, HttpInpainter, HttpProposer, HttpSegmenter, Inpainter,
    ObjectProposer, PseudoInpainter, Segmenter, ServiceConfig, StubProposer, StubSegmenter,
    INPAINTER_URL_ENV, PROPOSER_URL_ENV, SEGMENTER_URL_ENV,
};
pub use manifest::{
    manifest_base, read_manifest, relative_to, resolve, write_manifest, DatasetManifest,
    ManifestEntry, MaskRecordEntry, TamperedEntry,
};
pub use pipeline::{
    generate_masks, generate_scenes, generate_tampered, inpaint_target, list_images, load_groups,
    load_rgb, GenDataOutput, GenFailure, MaskGenOutput, Rejection, DEFAULT_AREA_TARGETS,
};
pub use pseudo::{preset, presets, pseudo_inpaint, PseudoInpainterParams};
pub use scene::{procedural_scene, SCENE_VOCABULARY};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::maskgen::{random_polygon_mask, MAX_AREA_FRACTION, MIN_AREA_FRACTION};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectProposal {
    pub names: Vec<String>,
    pub caption: String,
}

impl ObjectProposal {
    pub fn new(names: Vec<String>, caption: String) -> Result<Self> {
        if !names.is_empty() && caption.trim().is_empty() {
            return Err(Error::invalid("proposal with object names needs a caption"));
        }
        Ok(ObjectProposal { names, caption })
    }
}

/// One original image, its K tampered variants and the shared mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGroup {
    pub original_image: RgbImage,
    pub tampered_images: Vec<RgbImage>,
    pub mask: Mask,
    pub caption: String,
    pub inpainter_ids: Vec<String>,
    /// Mask is a random polygon rather than an object mask.
    pub random_mask: bool,
}

impl SampleGroup {
    pub fn k(&self) -> usize {
        self.tampered_images.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tampered_images.is_empty() {
            return Err(Error::Validation(
                "sample group has no tampered image".into(),
            ));
        }
        if self.inpainter_ids.len() != self.tampered_images.len() {
            return Err(Error::Validation(
                "one inpainter id per tampered image required".into(),
            ));
        }
        let mut ids = self.inpainter_ids.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != self.inpainter_ids.len() {
            return Err(Error::Validation("inpainter ids must be distinct".into()));
        }
        let dims = (
            self.original_image.height() as usize,
            self.original_image.width() as usize,
        );
        if self.mask.dims() != dims
            || self
                .tampered_images
                .iter()
                .any(|t| (t.height() as usize, t.width() as usize) != dims)
        {
            return Err(Error::Validation(
                "images and mask must share dimensions".into(),
            ));
        }
        Ok(())
    }

    /// Keeps the first `k` tampered variants.
    pub fn truncated(&self, k: usize) -> SampleGroup {
        let mut g = self.clone();
        g.tampered_images.truncate(k);
        g.inpainter_ids.truncate(k);
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupOptions {
    /// Probability of replacing the mask by an area-matched random polygon.
    pub p_random: f64,
    pub seed: u64,
}

impl Default for GroupOptions {
    fn default() -> Self {
        GroupOptions {
            p_random: 0.5,
            seed: 0,
        }
    }
}

const POLYGON_RETRIES: u64 = 8;

/// Polygon mask with the same area fraction as `mask` (clamped to the
/// accepted range), retrying a few vertex draws.
pub fn area_matched_polygon(mask: &Mask, seed: u64) -> Result<Mask> {
    let target = mask
        .area_fraction()
        .clamp(MIN_AREA_FRACTION, MAX_AREA_FRACTION);
    let mut last = None;
    for attempt in 0..POLYGON_RETRIES {
        match random_polygon_mask(
            mask.height(),
            mask.width(),
            target,
            seed.wrapping_add(attempt),
        ) {
            Ok(m) => return Ok(m),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Runs every inpainter on the image. With probability `p_random` the mask
/// is first replaced by an area-matched random polygon.
pub fn build_sample_group(
    image: &RgbImage,
    mask: &Mask,
    caption: &str,
    inpainters: &[&dyn Inpainter],
    options: &GroupOptions,
) -> Result<SampleGroup> {
    if inpainters.is_empty() {
        return Err(Error::invalid("at least one inpainter is required"));
    }
    if !(0.0..=1.0).contains(&options.p_random) {
        return Err(Error::invalid("p_random must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let random_mask = rng.random_bool(options.p_random);
    let mask = if random_mask {
        area_matched_polygon(mask, rng.random())?
    } else {
        mask.clone()
    };
    let tampered_images = inpainters
        .iter()
        .map(|inp| inp.inpaint(image, &mask, caption))
        .collect::<Result<Vec<_>>>()?;
    let group = SampleGroup {
        original_image: image.clone(),
        tampered_images,
        mask,
        caption: caption.to_string(),
        inpainter_ids: inpainters.iter().map(|i| i.id().to_string()).collect(),
        random_mask,
    };
    group.validate()?;
    Ok(group)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize) -> Vec<PseudoInpainter> {
        presets()
            .into_iter()
            .take(n)
            .map(|p| PseudoInpainter::new(p).unwrap())
            .collect()
    }

    fn refs(v: &[PseudoInpainter]) -> Vec<&dyn Inpainter> {
        v.iter().map(|p| p as &dyn Inpainter).collect()
    }

    #[test]
    fn k_tampered_images() {
        let img = procedural_scene(32, 32, 1);
        let mask = Mask::from_fn(32, 32, |(r, c)| r < 12 && c < 12);
        let inps = pseudo(2);
        let opts = GroupOptions {
            p_random: 0.0,
            seed: 1,
        };
        let g = build_sample_group(&img, &mask, "cap", &refs(&inps), &opts).unwrap();
        assert_eq!(g.k(), 2);
        assert_eq!(g.mask, mask);
        assert!(!g.random_mask);
        assert!(build_sample_group(&img, &mask, "cap", &[], &opts).is_err());
    }

    #[test]
    fn forced_random_mask() {
        let img = procedural_scene(40, 40, 2);
        let mask = Mask::from_fn(40, 40, |(r, c)| r < 20 && c < 16);
        let inps = pseudo(1);
        let g = build_sample_group(
            &img,
            &mask,
            "cap",
            &refs(&inps),
            &GroupOptions {
                p_random: 1.0,
                seed: 3,
            },
        )
        .unwrap();
        assert!(g.random_mask);
        assert_ne!(g.mask, mask);
        assert!((g.mask.area_fraction() - mask.area_fraction()).abs() <= 0.02);
        assert_eq!(crate::maskgen::count_components(&g.mask), 1);
    }

    #[test]
    fn random_substitution_rate() {
        let img = procedural_scene(16, 16, 3);
        let mask = Mask::from_fn(16, 16, |(r, c)| r < 8 && c < 8);
        let inps = [PseudoInpainter::new(PseudoInpainterParams::identity("id")).unwrap()];
        let n = (0..1000)
            .filter(|&s| {
                build_sample_group(
                    &img,
                    &mask,
                    "",
                    &refs(&inps),
                    &GroupOptions {
                        p_random: 0.5,
                        seed: s,
                    },
                )
                .unwrap()
                .random_mask
            })
            .count();
        assert!((450..=550).contains(&n), "{n}");
    }

    #[test]
    fn proposal_needs_caption_with_names() {
        assert!(ObjectProposal::new(vec!["cup".into()], "".into()).is_err());
        assert!(ObjectProposal::new(vec![], "".into()).is_ok());
    }
}
