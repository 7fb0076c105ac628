//! Detection and localisation metrics, the perturbation suite and dataset
//! evaluation reports.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::datagen::{resolve, DatasetManifest};
use crate::error::{Error, Result};
use crate::heads::{detect, detection_score, TamperMap, Verdict};
use crate::imageops::{blur_planes, from_planes, jpeg_round_trip, to_planes};
use crate::mask::{check_same_dims, Mask};

/// Anything that maps an image to a tamper map of the same size.
pub trait TamperModel {
    fn predict(&self, image: &RgbImage) -> Result<TamperMap>;
}

/// Mann–Whitney AUC: P(s⁺ > s⁻) + ½·P(s⁺ = s⁻), via midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "AUC needs both positive and negative samples",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Iou {
    pub f1: f64,
    pub iou: f64,
}

/// F1 and IoU of the map binarised at `threshold` (p ≥ threshold). An empty
/// prediction against an empty ground truth scores 1 on both.
pub fn f1_iou(pred: &TamperMap, gt: &Mask, threshold: f64) -> Result<F1Iou> {
    check_same_dims(pred.dims(), gt.dims(), "f1_iou")?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.probabilities.iter().zip(gt.view().iter()) {
        match (p >= threshold, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(F1Iou { f1: 1.0, iou: 1.0 });
    }
    Ok(F1Iou {
        f1: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
        iou: tp as f64 / (tp + fp + fn_) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "level", rename_all = "snake_case")]
pub enum Perturbation {
    /// Quality 80 or 70.
    Jpeg(u8),
    /// Scale 0.75 or 0.5 on both axes.
    Resize(f64),
    /// Gaussian kernel variance 10 or 5.
    Blur(f64),
}

impl Perturbation {
    /// The six perturbations of the robustness suite.
    pub fn suite() -> [Perturbation; 6] {
        [
            Perturbation::Jpeg(80),
            Perturbation::Jpeg(70),
            Perturbation::Resize(0.75),
            Perturbation::Resize(0.5),
            Perturbation::Blur(10.0),
            Perturbation::Blur(5.0),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Perturbation::Jpeg(q) => q == 80 || q == 70,
            Perturbation::Resize(s) => s == 0.75 || s == 0.5,
            Perturbation::Blur(v) => v == 10.0 || v == 5.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "unsupported perturbation level {self}"
            )))
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Perturbation::Jpeg(_) => "jpeg",
            Perturbation::Resize(_) => "resize",
            Perturbation::Blur(_) => "blur",
        }
    }

    pub fn level(&self) -> f64 {
        match *self {
            Perturbation::Jpeg(q) => q as f64,
            Perturbation::Resize(s) => s,
            Perturbation::Blur(v) => v,
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind(), self.level())
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    /// Parses `kind:level`, e.g. `jpeg:80`, `resize:0.5`, `blur:10`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, level) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("perturbation {s:?} is not kind:level")))?;
        let level: f64 = level
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("perturbation level {level:?} is not a number")))?;
        let p = match kind.trim().to_ascii_lowercase().as_str() {
            "jpeg" if level.fract() == 0.0 && (1.0..=100.0).contains(&level) => {
                Perturbation::Jpeg(level as u8)
            }
            "resize" => Perturbation::Resize(level),
            "blur" => Perturbation::Blur(level),
            _ => return Err(Error::invalid(format!("unknown perturbation {s:?}"))),
        };
        p.validate()?;
        Ok(p)
    }
}

/// Size after a resize perturbation (rounded, at least one pixel).
pub fn resized_dims(width: u32, height: u32, scale: f64) -> (u32, u32) {
    (
        ((width as f64 * scale).round() as u32).max(1),
        ((height as f64 * scale).round() as u32).max(1),
    )
}

pub fn perturb(image: &RgbImage, perturbation: Perturbation) -> Result<RgbImage> {
    perturbation.validate()?;
    match perturbation {
        Perturbation::Jpeg(q) => jpeg_round_trip(image, q),
        Perturbation::Resize(s) => {
            let (w, h) = resized_dims(image.width(), image.height(), s);
            Ok(image::imageops::resize(image, w, h, FilterType::Triangle))
        }
        Perturbation::Blur(variance) => Ok(from_planes(&blur_planes(
            &to_planes(image),
            variance.sqrt(),
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auc: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImage {
    pub path: String,
    pub score: f64,
    pub verdict: Verdict,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalisationMetrics {
    pub f1_mean: f64,
    pub iou_mean: f64,
    /// Tampered images only.
    pub per_image: Vec<PerImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationInfo {
    pub kind: String,
    pub level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub detection: DetectionMetrics,
    pub localisation: LocalisationMetrics,
    pub perturbation: Option<PerturbationInfo>,
    pub num_original: usize,
    pub num_tampered: usize,
}

pub const REPORT_CSV_HEADER: &str = "dataset_id,perturbation,det_auc,det_acc,loc_f1,loc_iou";

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Summary row matching [`REPORT_CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let pert = self
            .perturbation
            .as_ref()
            .map(|p| format!("{}:{}", p.kind, p.level))
            .unwrap_or_else(|| "none".into());
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.dataset_id,
            pert,
            self.detection.auc,
            self.detection.accuracy,
            self.localisation.f1_mean,
            self.localisation.iou_mean
        )
    }
}

/// Scores every original (label 0, empty ground truth) and every tampered
/// image (label 1, ground truth = the edited mask of its record) in the
/// manifest, optionally after a perturbation. Localisation is averaged per
/// image over tampered images only.
pub fn evaluate_dataset(
    model: &dyn TamperModel,
    manifest: &DatasetManifest,
    base: &Path,
    perturbation: Option<Perturbation>,
    dataset_id: &str,
) -> Result<EvalReport> {
    if let Some(p) = perturbation {
        p.validate()?;
    }
    let mut items: Vec<(std::path::PathBuf, Option<std::path::PathBuf>)> = Vec::new();
    for e in &manifest.entries {
        items.push((e.image_path.clone(), None));
        for t in &e.tampered {
            let rec = e.record(t.mask_number).ok_or_else(|| {
                Error::Validation(format!("absent mask_number {}", t.mask_number))
            })?;
            items.push((t.path.clone(), Some(rec.edited_mask_path.clone())));
        }
    }
    let num_tampered = items.iter().filter(|i| i.1.is_some()).count();
    if num_tampered == 0 || num_tampered == items.len() {
        return Err(Error::invalid(
            "evaluation needs original and tampered images",
        ));
    }

    let mut scores = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    let mut correct = 0usize;
    let mut per_image = Vec::new();
    for (path, mask_path) in &items {
        let full = resolve(base, path);
        let mut image = image::open(&full)?.to_rgb8();
        if let Some(p) = perturbation {
            image = perturb(&image, p)?;
        }
        let map = model.predict(&image)?;
        if map.dims() != (image.height() as usize, image.width() as usize) {
            return Err(Error::Validation(
                "model returned a map of the wrong size".into(),
            ));
        }
        let score = detection_score(&map);
        let verdict = detect(&map);
        let tampered = mask_path.is_some();
        scores.push(score);
        labels.push(tampered);
        correct += usize::from((verdict == Verdict::Tampered) == tampered);
        if let Some(mp) = mask_path {
            let gt = Mask::load(&resolve(base, mp))?
                .resize_nearest(image.height() as usize, image.width() as usize);
            let m = f1_iou(&map, &gt, 0.5)?;
            per_image.push(PerImage {
                path: path.display().to_string(),
                score,
                verdict,
                f1: m.f1,
                iou: m.iou,
            });
        }
    }
    let mean =
        |f: fn(&PerImage) -> f64| per_image.iter().map(f).sum::<f64>() / per_image.len() as f64;
    Ok(EvalReport {
        dataset_id: dataset_id.to_string(),
        detection: DetectionMetrics {
            auc: roc_auc(&scores, &labels)?,
            accuracy: correct as f64 / items.len() as f64,
        },
        localisation: LocalisationMetrics {
            f1_mean: mean(|p| p.f1),
            iou_mean: mean(|p| p.iou),
            per_image,
        },
        perturbation: perturbation.map(|p| PerturbationInfo {
            kind: p.kind().to_string(),
            level: p.level(),
        }),
        num_original: items.len() - num_tampered,
        num_tampered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::gradient_energy;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.3, 0.4], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = 20;
            let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0 || rng.random_bool(0.3)).collect();
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..6) as f64) / 5.0)
                .collect();
            assert!(
                (roc_auc(&scores, &labels).unwrap() - pairwise(&scores, &labels)).abs() < 1e-12
            );
        }
    }

    #[test]
    fn f1_iou_examples() {
        let gt = Mask::from_fn(4, 4, |(r, _)| r < 2);
        let exact = TamperMap::new(gt.to_f64()).unwrap();
        assert_eq!(
            f1_iou(&exact, &gt, 0.5).unwrap(),
            F1Iou { f1: 1.0, iou: 1.0 }
        );
        let ones = TamperMap::constant(4, 4, 1.0);
        let m = f1_iou(&ones, &gt, 0.5).unwrap();
        assert!((m.iou - 0.5).abs() < 1e-15 && (m.f1 - 2.0 / 3.0).abs() < 1e-15);
        let disjoint = TamperMap::new(gt.to_f64().mapv(|v| 1.0 - v)).unwrap();
        assert_eq!(
            f1_iou(&disjoint, &gt, 0.5).unwrap(),
            F1Iou { f1: 0.0, iou: 0.0 }
        );
        let empty = TamperMap::constant(4, 4, 0.0);
        assert_eq!(
            f1_iou(&empty, &Mask::zeros(4, 4), 0.5).unwrap(),
            F1Iou { f1: 1.0, iou: 1.0 }
        );
        assert!(f1_iou(&empty, &Mask::zeros(4, 5), 0.5).is_err());
    }

    proptest! {
        #[test]
        fn f1_iou_relation(bits in proptest::collection::vec(0u8..4, 36)) {
            let pred = TamperMap::new(ndarray::Array2::from_shape_fn((6, 6), |(r, c)| (bits[r * 6 + c] & 1) as f64)).unwrap();
            let gt = Mask::from_fn(6, 6, |(r, c)| bits[r * 6 + c] & 2 != 0);
            let m = f1_iou(&pred, &gt, 0.5).unwrap();
            prop_assert!(m.iou <= m.f1 + 1e-15);
            prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            raw in proptest::collection::vec(-5.0f64..5.0, 4..30),
        ) {
            let labels: Vec<bool> = (0..raw.len()).map(|i| i % 3 == 0).collect();
            let t: Vec<f64> = raw.iter().map(|x| x.exp() * 2.0 + 1.0).collect();
            prop_assert!((roc_auc(&raw, &labels).unwrap() - roc_auc(&t, &labels).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_parsing() {
        assert_eq!(
            "jpeg:80".parse::<Perturbation>().unwrap(),
            Perturbation::Jpeg(80)
        );
        assert_eq!(
            "resize:0.5".parse::<Perturbation>().unwrap(),
            Perturbation::Resize(0.5)
        );
        assert_eq!(
            "blur:10".parse::<Perturbation>().unwrap(),
            Perturbation::Blur(10.0)
        );
        for bad in [
            "jpeg:90",
            "resize:0.3",
            "blur:7",
            "noise:1",
            "jpeg",
            "blur:x",
        ] {
            assert!(bad.parse::<Perturbation>().is_err(), "{bad}");
        }
    }

    #[test]
    fn perturb_contracts() {
        let img = crate::datagen::procedural_scene(100, 200, 4);
        assert_eq!(
            perturb(&img, Perturbation::Resize(0.5))
                .unwrap()
                .dimensions(),
            (100, 50)
        );
        let j = perturb(&img, Perturbation::Jpeg(80)).unwrap();
        assert_eq!(j.dimensions(), img.dimensions());
        let max_dev = j
            .as_raw()
            .iter()
            .zip(img.as_raw())
            .map(|(a, b)| (*a as i32 - *b as i32).abs())
            .max()
            .unwrap();
        assert!(max_dev < 128, "{max_dev}");
        let e10 = gradient_energy(&perturb(&img, Perturbation::Blur(10.0)).unwrap());
        let e5 = gradient_energy(&perturb(&img, Perturbation::Blur(5.0)).unwrap());
        assert!(e10 < e5 && e5 < gradient_energy(&img));
        assert!(perturb(&img, Perturbation::Jpeg(50)).is_err());
    }
}
