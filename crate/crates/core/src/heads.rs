//! Localisation head, localisation loss and the image-level detection score.

use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::imageops::linear_taps;
use crate::impl_params;
use crate::mask::{check_same_dims, Mask};
use crate::patchgrid::PatchGrid;

pub const BCE_CLIP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;
pub const DETECTION_THRESHOLD: f64 = 0.5;
pub const TOP_FRACTION: f64 = 0.01;

/// Per-pixel tampering probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TamperMap {
    pub probabilities: Array2<f64>,
}

impl TamperMap {
    pub fn new(probabilities: Array2<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::invalid("tamper map is empty"));
        }
        if !probabilities.iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::invalid("tamper map values must lie in [0, 1]"));
        }
        Ok(TamperMap { probabilities })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        TamperMap {
            probabilities: Array2::from_elem((height, width), value),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.probabilities.dim()
    }

    /// 8-bit grey image with value round(255·p).
    pub fn to_gray(&self) -> GrayImage {
        let (h, w) = self.dims();
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([(self.probabilities[[y as usize, x as usize]] * 255.0).round() as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Raw float export: JSON with `height`, `width` and row-major `data`.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dims();
        let body = serde_json::json!({
            "height": h,
            "width": w,
            "data": self.probabilities.iter().collect::<Vec<_>>(),
        });
        std::fs::write(path, body.to_string()).map_err(|e| Error::io(path, e))
    }
}

/// 3×3 convolution (zero padding, one output channel) over the patch grid,
/// followed by a sigmoid and bilinear upsampling to the target size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalisationHead {
    /// Kernel taps × input channels; tap k = 3·(dr+1) + (dc+1).
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl_params!(LocalisationHead; weight, bias);

pub struct LocalisationCache {
    features: Array2<f64>,
    grid: PatchGrid,
    probs: Array2<f64>,
    target: (usize, usize),
}

impl LocalisationHead {
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (6.0 / (9 * feature_dim + 1) as f64).sqrt();
        LocalisationHead {
            weight: Array2::from_shape_fn((9, feature_dim), |_| rng.random_range(-a..a)),
            bias: Array1::zeros(1),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn shifted(grid: &PatchGrid, r: usize, c: usize, tap: usize) -> Option<usize> {
        let rr = r as isize + (tap / 3) as isize - 1;
        let cc = c as isize + (tap % 3) as isize - 1;
        (rr >= 0 && cc >= 0 && (rr as usize) < grid.rows && (cc as usize) < grid.cols)
            .then(|| rr as usize * grid.cols + cc as usize)
    }

    pub fn forward(
        &self,
        features: &Array2<f64>,
        grid: &PatchGrid,
        target: (usize, usize),
    ) -> Result<(Array2<f64>, LocalisationCache)> {
        if features.nrows() != grid.len() || features.ncols() != self.feature_dim() {
            return Err(Error::invalid(format!(
                "localisation head expects {}x{} features, got {:?}",
                grid.len(),
                self.feature_dim(),
                features.dim()
            )));
        }
        if target.0 == 0 || target.1 == 0 {
            return Err(Error::invalid("target size must be positive"));
        }
        let taps = features.dot(&self.weight.t());
        let probs = Array2::from_shape_fn((grid.rows, grid.cols), |(r, c)| {
            let logit = self.bias[0]
                + (0..9)
                    .filter_map(|k| Self::shifted(grid, r, c, k).map(|n| taps[[n, k]]))
                    .sum::<f64>();
            sigmoid(logit)
        });
        let out = upsample(&probs, target);
        Ok((
            out,
            LocalisationCache {
                features: features.clone(),
                grid: *grid,
                probs,
                target,
            },
        ))
    }

    /// Accumulates parameter gradients and returns dL/dfeatures.
    pub fn backward(
        &self,
        cache: &LocalisationCache,
        dmap: &Array2<f64>,
        grad: &mut LocalisationHead,
    ) -> Array2<f64> {
        let grid = &cache.grid;
        let dprobs = upsample_backward(dmap, (grid.rows, grid.cols), cache.target);
        let mut dtaps = Array2::zeros((grid.len(), 9));
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let p = cache.probs[[r, c]];
                let dlogit = dprobs[[r, c]] * p * (1.0 - p);
                grad.bias[0] += dlogit;
                for k in 0..9 {
                    if let Some(n) = Self::shifted(grid, r, c, k) {
                        dtaps[[n, k]] += dlogit;
                    }
                }
            }
        }
        grad.weight += &dtaps.t().dot(&cache.features);
        dtaps.dot(&self.weight)
    }

    pub fn localise(&self, fx: &FeatureSequence, target: (usize, usize)) -> Result<TamperMap> {
        if fx.modality != Modality::Fused {
            return Err(Error::invalid("localisation needs fused features"));
        }
        let (probs, _) = self.forward(&fx.features, &fx.grid, target)?;
        Ok(TamperMap {
            probabilities: probs,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn upsample(grid: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    crate::imageops::resize_bilinear(grid, target.0, target.1)
}

fn upsample_backward(
    dout: &Array2<f64>,
    src: (usize, usize),
    target: (usize, usize),
) -> Array2<f64> {
    let rt = linear_taps(src.0, target.0);
    let ct = linear_taps(src.1, target.1);
    let mut d = Array2::zeros(src);
    for (y, &(r0, r1, fr)) in rt.iter().enumerate() {
        for (x, &(c0, c1, fc)) in ct.iter().enumerate() {
            let g = dout[[y, x]];
            d[[r0, c0]] += g * (1.0 - fr) * (1.0 - fc);
            d[[r0, c1]] += g * (1.0 - fr) * fc;
            d[[r1, c0]] += g * fr * (1.0 - fc);
            d[[r1, c1]] += g * fr * fc;
        }
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocLoss {
    pub bce: f64,
    pub dice: f64,
}

impl LocLoss {
    pub fn total(&self) -> f64 {
        self.bce + self.dice
    }
}

/// Mean pixelwise BCE plus soft dice loss.
pub fn loc_loss(pred: &Array2<f64>, target: &Mask) -> Result<LocLoss> {
    Ok(loc_loss_grad(pred, target)?.0)
}

pub fn loc_loss_grad(pred: &Array2<f64>, target: &Mask) -> Result<(LocLoss, Array2<f64>)> {
    check_same_dims(pred.dim(), target.dims(), "loc_loss")?;
    let n = pred.len() as f64;
    let y = target.to_f64();
    let mut bce = 0.0;
    let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(y.iter()) {
        let pc = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
        bce -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        inter += p * t;
        psum += p;
        ysum += t;
    }
    bce /= n;
    let denom = psum + ysum + DICE_SMOOTH;
    let numer = 2.0 * inter + DICE_SMOOTH;
    let dice = 1.0 - numer / denom;

    let mut grad = Array2::zeros(pred.dim());
    ndarray::Zip::from(&mut grad)
        .and(pred)
        .and(&y)
        .for_each(|g, &p, &t| {
            let d_bce = if p > BCE_CLIP && p < 1.0 - BCE_CLIP {
                (-t / p + (1.0 - t) / (1.0 - p)) / n
            } else {
                0.0
            };
            let d_dice = -(2.0 * t * denom - numer) / (denom * denom);
            *g = d_bce + d_dice;
        });
    Ok((LocLoss { bce, dice }, grad))
}

/// Mean of the ceil(1%) largest map values.
pub fn detection_score(map: &TamperMap) -> f64 {
    let mut vals: Vec<f64> = map.probabilities.iter().copied().collect();
    let k = ((TOP_FRACTION * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
    let idx = vals.len() - k;
    vals.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    vals[idx..].iter().sum::<f64>() / k as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Tampered,
    Original,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Tampered => "TAMPERED",
            Verdict::Original => "ORIGINAL",
        })
    }
}

/// Tampered iff the detection score is strictly above 0.5.
pub fn detect(map: &TamperMap) -> Verdict {
    verdict_for_score(detection_score(map))
}

pub fn verdict_for_score(score: f64) -> Verdict {
    if score > DETECTION_THRESHOLD {
        Verdict::Tampered
    } else {
        Verdict::Original
    }
}
