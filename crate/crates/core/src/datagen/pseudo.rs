//! Pseudo-inpainters: deterministic simulators of latent-diffusion
//! inpainting. The whole image goes through an autoencoder-like degradation
//! (2× down/up resampling and a colour shift); the masked region is then
//! replaced by hole-filled smoothed context plus seeded noise texture.

use image::RgbImage;
use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{
    blur_plane, down_up, from_planes, hash_bytes, image_hash, jpeg_round_trip, to_planes,
    value_noise,
};
use crate::mask::{check_same_dims, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoInpainterParams {
    pub id: String,
    pub seed: u64,
    /// Gaussian σ of the context fill, in pixels.
    pub blur_sigma: f64,
    /// Lattice spacing of the in-mask noise texture, in pixels.
    pub noise_scale: f64,
    /// Noise amplitude on the 0..=255 scale.
    pub noise_amplitude: f64,
    /// Per-channel additive shift applied with the global degradation.
    pub color_shift: [f64; 3],
    /// Blend weight of the degraded image everywhere, in [0, 1].
    pub degradation_strength: f64,
    /// Blend weight of the synthesised content inside the mask, in [0, 1].
    pub inpaint_strength: f64,
    /// Final JPEG re-encode of the whole output.
    pub jpeg_quality: Option<u8>,
}

impl PseudoInpainterParams {
    /// Zero-strength variant: returns its input unchanged.
    pub fn identity(id: &str) -> Self {
        PseudoInpainterParams {
            id: id.to_string(),
            seed: 0,
            blur_sigma: 0.0,
            noise_scale: 1.0,
            noise_amplitude: 0.0,
            color_shift: [0.0; 3],
            degradation_strength: 0.0,
            inpaint_strength: 0.0,
            jpeg_quality: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("pseudo-inpainter id is empty"));
        }
        for (name, v) in [
            ("degradation_strength", self.degradation_strength),
            ("inpaint_strength", self.inpaint_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} not in [0, 1]")));
            }
        }
        if self.blur_sigma < 0.0 || self.noise_amplitude < 0.0 || self.noise_scale <= 0.0 {
            return Err(Error::invalid(
                "blur sigma, noise scale and amplitude must be non-negative",
            ));
        }
        if matches!(self.jpeg_quality, Some(q) if q == 0 || q > 100) {
            return Err(Error::invalid("jpeg quality must be in 1..=100"));
        }
        Ok(())
    }
}

/// Built-in presets emulating different inpainters.
pub fn presets() -> Vec<PseudoInpainterParams> {
    let base = |id: &str, seed| PseudoInpainterParams {
        seed,
        degradation_strength: 0.6,
        inpaint_strength: 0.9,
        ..PseudoInpainterParams::identity(id)
    };
    vec![
        PseudoInpainterParams {
            blur_sigma: 4.0,
            noise_scale: 6.0,
            noise_amplitude: 18.0,
            color_shift: [3.0, -2.0, 2.0],
            ..base("pi-smooth", 101)
        },
        PseudoInpainterParams {
            blur_sigma: 2.0,
            noise_scale: 2.5,
            noise_amplitude: 28.0,
            color_shift: [-3.0, 3.0, -1.0],
            ..base("pi-grain", 202)
        },
        PseudoInpainterParams {
            blur_sigma: 6.0,
            noise_scale: 10.0,
            noise_amplitude: 12.0,
            color_shift: [6.0, 2.0, -5.0],
            ..base("pi-warm", 303)
        },
        PseudoInpainterParams {
            blur_sigma: 3.0,
            noise_scale: 4.0,
            noise_amplitude: 20.0,
            color_shift: [0.0, -3.0, 4.0],
            jpeg_quality: Some(85),
            ..base("pi-jpeg", 404)
        },
    ]
}

pub fn preset(id: &str) -> Option<PseudoInpainterParams> {
    presets().into_iter().find(|p| p.id == id)
}

/// Normalised convolution of the unmasked pixels: fills the hole from its
/// surroundings, falling back to the unmasked mean deep inside large holes.
fn fill_from_context(plane: &Array2<f64>, keep: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let total = keep.sum();
    let mean = if total > 0.0 {
        (plane * keep).sum() / total
    } else {
        plane.mean().unwrap_or(0.0)
    };
    let sigma = sigma.max(0.5);
    let num = blur_plane(&(plane * keep), sigma);
    let den = blur_plane(keep, sigma);
    const EPS: f64 = 1e-3;
    (num + EPS * mean) / (den + EPS)
}

pub fn pseudo_inpaint(
    image: &RgbImage,
    mask: &Mask,
    params: &PseudoInpainterParams,
) -> Result<RgbImage> {
    params.validate()?;
    let (h, w) = (image.height() as usize, image.width() as usize);
    check_same_dims((h, w), mask.dims(), "pseudo_inpaint")?;
    let planes = to_planes(image);
    let m = mask.to_f64();
    let keep = m.mapv(|v| 1.0 - v);
    let seed = hash_bytes(&[&params.seed.to_le_bytes(), &image_hash(image).to_le_bytes()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let d = params.degradation_strength;
    let s = params.inpaint_strength;
    let mut out = Array3::zeros(planes.dim());
    for ch in 0..3 {
        let plane = planes.index_axis(Axis(0), ch).to_owned();
        let mut result = if d > 0.0 {
            let degraded = down_up(&plane) + params.color_shift[ch];
            &plane * (1.0 - d) + &degraded * d
        } else {
            plane.clone()
        };
        if s > 0.0 && mask.count() > 0 {
            let noise = value_noise(h, w, params.noise_scale, &mut rng) * params.noise_amplitude;
            let synth = fill_from_context(&result, &keep, params.blur_sigma) + noise;
            let blend = &m * s;
            result = &result * &blend.mapv(|b| 1.0 - b) + &synth * &blend;
        }
        out.index_axis_mut(Axis(0), ch).assign(&result);
    }
    let img = from_planes(&out);
    match params.jpeg_quality {
        Some(q) => jpeg_round_trip(&img, q),
        None => Ok(img),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::scene::procedural_scene;
    use crate::maskgen::random_polygon_mask;

    #[test]
    fn identity_is_exact() {
        let img = procedural_scene(32, 40, 1);
        let mask = Mask::from_fn(32, 40, |(r, c)| r < 10 && c < 20);
        assert_eq!(
            pseudo_inpaint(&img, &mask, &PseudoInpainterParams::identity("id")).unwrap(),
            img
        );
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let img = procedural_scene(30, 44, 2);
        let mask = Mask::from_fn(30, 44, |(r, _)| r > 15);
        for p in presets() {
            let a = pseudo_inpaint(&img, &mask, &p).unwrap();
            assert_eq!(a, pseudo_inpaint(&img, &mask, &p).unwrap());
            assert_eq!(a.dimensions(), img.dimensions());
        }
        assert!(pseudo_inpaint(&img, &Mask::zeros(30, 43), &presets()[0]).is_err());
    }

    #[test]
    fn at_least_four_distinct_presets() {
        let ps = presets();
        assert!(ps.len() >= 4);
        let mut ids: Vec<_> = ps.iter().map(|p| p.id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), ps.len());
        assert!(ps.iter().all(|p| p.validate().is_ok()));
    }

    /// Mean absolute change inside vs outside the mask over 20 scenes.
    #[test]
    fn masked_region_changes_more() {
        for p in presets() {
            for seed in 0..20 {
                let img = procedural_scene(48, 48, 1000 + seed);
                let mask = random_polygon_mask(48, 48, 0.2, seed).unwrap();
                let out = pseudo_inpaint(&img, &mask, &p).unwrap();
                let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
                for (x, y, px) in out.enumerate_pixels() {
                    let orig = img.get_pixel(x, y);
                    let diff: f64 = (0..3)
                        .map(|c| (px[c] as f64 - orig[c] as f64).abs())
                        .sum::<f64>()
                        / 3.0;
                    let slot = if mask.get(y as usize, x as usize) {
                        &mut inside
                    } else {
                        &mut outside
                    };
                    slot.0 += diff;
                    slot.1 += 1;
                }
                let (mi, mo) = (inside.0 / inside.1 as f64, outside.0 / outside.1 as f64);
                assert!(mi > mo, "{} seed {seed}: inside {mi} outside {mo}", p.id);
            }
        }
    }

    #[test]
    fn empty_mask_only_degrades() {
        let img = procedural_scene(24, 24, 5);
        let mut p = presets()[0].clone();
        let a = pseudo_inpaint(&img, &Mask::zeros(24, 24), &p).unwrap();
        p.inpaint_strength = 0.0;
        assert_eq!(a, pseudo_inpaint(&img, &Mask::zeros(24, 24), &p).unwrap());
    }
}
