//! Tamper-mask post-processing and synthesis.
//!
//! Object masks go through an area filter and a cohesion step (3×3 square
//! dilations counted on 8-connected components). Random masks are filled
//! eight-vertex polygons rescaled to a target area drawn from the observed
//! object-mask areas.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::Mask;

pub const MIN_AREA_FRACTION: f64 = 0.0023;
pub const MAX_AREA_FRACTION: f64 = 0.83;
pub const MAX_DILATIONS: usize = 5;
/// Dilation continues while a mask has at least this many components.
pub const MAX_COMPONENTS: usize = 8;
pub const POLYGON_VERTICES: usize = 8;
pub const POLYGON_AREA_TOLERANCE: f64 = 0.02;
pub const POLYGON_MAX_ATTEMPTS: usize = 50;

/// Name recorded as `masked_object` for polygon masks.
pub const RANDOM_MASK_OBJECT: &str = "random_polygon";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaCheck {
    pub accepted: bool,
    pub fraction: f64,
}

pub fn filter_mask_by_area(mask: &Mask) -> Result<AreaCheck> {
    if mask.is_empty_image() {
        return Err(Error::invalid("area filter needs a non-empty image"));
    }
    let fraction = mask.area_fraction();
    Ok(AreaCheck {
        accepted: (MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&fraction),
        fraction,
    })
}

/// One dilation with a 3×3 square structuring element.
pub fn dilate(mask: &Mask) -> Mask {
    let (h, w) = mask.dims();
    let mut out = mask.clone();
    for ((r, c), &v) in mask.view().indexed_iter() {
        if !v {
            continue;
        }
        for rr in r.saturating_sub(1)..(r + 2).min(h) {
            for cc in c.saturating_sub(1)..(c + 2).min(w) {
                out.set(rr, cc, true);
            }
        }
    }
    out
}

/// 8-connected component labelling. Returns per-pixel labels (0 for
/// background, components numbered from 1) and the component count.
pub fn label_components(mask: &Mask) -> (Vec<usize>, usize) {
    let (h, w) = mask.dims();
    let mut labels = vec![0usize; h * w];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if labels[start] != 0 || !mask.get(start / w, start % w) {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    let j = rr * w + cc;
                    if labels[j] == 0 && mask.get(rr, cc) {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (labels, next)
}

pub fn count_components(mask: &Mask) -> usize {
    label_components(mask).1
}

/// Keeps only the largest 8-connected component.
pub fn largest_component(mask: &Mask) -> Mask {
    let (labels, n) = label_components(mask);
    if n <= 1 {
        return mask.clone();
    }
    let mut sizes = vec![0usize; n + 1];
    for &l in &labels {
        sizes[l] += 1;
    }
    let best = (1..=n)
        .max_by_key(|&l| (sizes[l], std::cmp::Reverse(l)))
        .unwrap_or(1);
    let w = mask.width();
    Mask::from_fn(mask.height(), w, |(r, c)| labels[r * w + c] == best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohesion {
    pub mask: Mask,
    pub dilations: usize,
    pub components: usize,
}

/// Dilates at least once, then again (up to five rounds in total) while the
/// mask still has eight or more components.
pub fn cohere_mask(mask: &Mask) -> Cohesion {
    let mut out = dilate(mask);
    let mut dilations = 1;
    let mut components = count_components(&out);
    while components >= MAX_COMPONENTS && dilations < MAX_DILATIONS {
        out = dilate(&out);
        dilations += 1;
        components = count_components(&out);
    }
    Cohesion {
        mask: out,
        dilations,
        components,
    }
}

/// Metadata kept for every accepted mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRecord {
    pub mask_number: usize,
    pub original_mask: Mask,
    pub edited_mask: Mask,
    pub masked_object: String,
    /// Area of the original mask as a fraction of the image.
    pub area_percentage: f64,
    /// Centroid (row, col) of the edited mask.
    pub centroid: (f64, f64),
}

impl MaskRecord {
    pub fn is_random(&self) -> bool {
        self.masked_object == RANDOM_MASK_OBJECT
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskDecision {
    Accepted(MaskRecord),
    Rejected { object: String, reason: String },
}

/// Runs the area filter and cohesion step on one object mask.
pub fn process_object_mask(mask_number: usize, object: &str, mask: Mask) -> Result<MaskDecision> {
    let area = filter_mask_by_area(&mask)?;
    if !area.accepted {
        return Ok(MaskDecision::Rejected {
            object: object.to_string(),
            reason: format!(
                "area {:.4} outside [{MIN_AREA_FRACTION}, {MAX_AREA_FRACTION}]",
                area.fraction
            ),
        });
    }
    let cohesion = cohere_mask(&mask);
    let centroid = cohesion.mask.centroid().unwrap_or((0.0, 0.0));
    Ok(MaskDecision::Accepted(MaskRecord {
        mask_number,
        original_mask: mask,
        edited_mask: cohesion.mask,
        masked_object: object.to_string(),
        area_percentage: area.fraction,
        centroid,
    }))
}

/// Builds a record for a polygon mask; no dilation is applied.
pub fn random_mask_record(mask_number: usize, mask: Mask) -> MaskRecord {
    MaskRecord {
        mask_number,
        area_percentage: mask.area_fraction(),
        centroid: mask.centroid().unwrap_or((0.0, 0.0)),
        original_mask: mask.clone(),
        edited_mask: mask,
        masked_object: RANDOM_MASK_OBJECT.to_string(),
    }
}

fn point_in_polygon(y: f64, x: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (yi, xi) = poly[i];
        let (yj, xj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn fill_polygon(height: usize, width: usize, poly: &[(f64, f64)]) -> Mask {
    Mask::from_fn(height, width, |(r, c)| {
        point_in_polygon(r as f64 + 0.5, c as f64 + 0.5, poly)
    })
}

/// Filled polygon from eight random vertices ordered by angle about their
/// centroid, rescaled about the centroid until its area fraction is within
/// 0.02 of `target_area`.
pub fn random_polygon_mask(
    height: usize,
    width: usize,
    target_area: f64,
    seed: u64,
) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("polygon mask needs a non-empty image"));
    }
    if !(target_area > 0.0 && target_area < 1.0) {
        return Err(Error::invalid(format!(
            "target area {target_area} not in (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<(f64, f64)> = (0..POLYGON_VERTICES)
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
            )
        })
        .collect();
    let cy = pts.iter().map(|p| p.0).sum::<f64>() / POLYGON_VERTICES as f64;
    let cx = pts.iter().map(|p| p.1).sum::<f64>() / POLYGON_VERTICES as f64;
    pts.sort_by(|a, b| {
        let ta = (a.0 - cy).atan2(a.1 - cx);
        let tb = (b.0 - cy).atan2(b.1 - cx);
        ta.total_cmp(&tb)
    });

    let mut scale = 1.0;
    let mut best = f64::INFINITY;
    for _ in 0..POLYGON_MAX_ATTEMPTS {
        let poly: Vec<(f64, f64)> = pts
            .iter()
            .map(|&(y, x)| (cy + scale * (y - cy), cx + scale * (x - cx)))
            .collect();
        let mask = largest_component(&fill_polygon(height, width, &poly));
        let frac = mask.area_fraction();
        if (frac - target_area).abs() <= POLYGON_AREA_TOLERANCE {
            return Ok(mask);
        }
        best = best.min((frac - target_area).abs());
        scale *= if frac == 0.0 {
            2.0
        } else {
            (target_area / frac).sqrt().clamp(0.5, 2.0)
        };
    }
    Err(Error::GenerationFailure(format!(
        "polygon area could not reach {target_area:.3} within {POLYGON_AREA_TOLERANCE} \
         (closest miss {best:.3})"
    )))
}

/// Bootstrap sampler over observed object-mask area fractions.
pub struct AreaSampler {
    observed: Vec<f64>,
    rng: ChaCha8Rng,
}

impl AreaSampler {
    pub fn new(observed: Vec<f64>, seed: u64) -> Result<Self> {
        if observed.is_empty() {
            return Err(Error::invalid(
                "area sampler needs at least one observed area",
            ));
        }
        Ok(AreaSampler {
            observed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self) -> f64 {
        self.observed[self.rng.random_range(0..self.observed.len())]
    }
}

/// Single bootstrap draw from `observed`.
pub fn sample_area_target(observed: &[f64], seed: u64) -> Result<f64> {
    Ok(AreaSampler::new(observed.to_vec(), seed)?.sample())
}
