//! Patch tiling of an image and the original/tampered/affected taxonomy.
//!
//! Tiling uses ceil division: the last row and column of patches are
//! truncated at the image border, so every pixel belongs to exactly one
//! patch for arbitrary image sizes.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{check_same_dims, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if height == 0 || width == 0 || patch_size == 0 {
            return Err(Error::invalid(format!(
                "patch grid needs positive dimensions, got {height}x{width} with patch size {patch_size}"
            )));
        }
        Ok(PatchGrid {
            image_height: height,
            image_width: width,
            patch_size,
            rows: height.div_ceil(patch_size),
            cols: width.div_ceil(patch_size),
        })
    }

    /// Number of patches N.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major patch index of the patch containing pixel (row, col).
    pub fn patch_of(&self, row: usize, col: usize) -> usize {
        (row / self.patch_size) * self.cols + col / self.patch_size
    }

    /// Pixel row and column ranges covered by patch `index`.
    pub fn bounds(&self, index: usize) -> (Range<usize>, Range<usize>) {
        let (pr, pc) = (index / self.cols, index % self.cols);
        let r0 = pr * self.patch_size;
        let c0 = pc * self.patch_size;
        (
            r0..(r0 + self.patch_size).min(self.image_height),
            c0..(c0 + self.patch_size).min(self.image_width),
        )
    }
}

/// Build a grid; thin alias kept for symmetry with the rest of the pipeline.
pub fn build_patch_grid(height: usize, width: usize, patch_size: usize) -> Result<PatchGrid> {
    PatchGrid::new(height, width, patch_size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchClass {
    Original,
    Tampered,
    Affected,
}

impl PatchClass {
    pub const ALL: [PatchClass; 3] = [
        PatchClass::Original,
        PatchClass::Tampered,
        PatchClass::Affected,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLabels {
    pub labels: Vec<PatchClass>,
}

impl PatchLabels {
    pub fn count(&self, class: PatchClass) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Labels every patch of an image.
///
/// Patches of an untampered image are all original. On a tampered image a
/// patch is tampered when any of its pixels is set in `mask`, affected
/// otherwise.
pub fn classify_patches(grid: &PatchGrid, mask: &Mask, is_tampered: bool) -> Result<PatchLabels> {
    check_same_dims(
        mask.dims(),
        (grid.image_height, grid.image_width),
        "classify_patches",
    )?;
    if !is_tampered {
        return Ok(PatchLabels {
            labels: vec![PatchClass::Original; grid.len()],
        });
    }
    let mut hit = vec![false; grid.len()];
    for ((r, c), &v) in mask.view().indexed_iter() {
        if v {
            hit[grid.patch_of(r, c)] = true;
        }
    }
    Ok(PatchLabels {
        labels: hit
            .into_iter()
            .map(|h| {
                if h {
                    PatchClass::Tampered
                } else {
                    PatchClass::Affected
                }
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_sizes() {
        let g = build_patch_grid(28, 28, 14).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (2, 2, 4));
        let g = build_patch_grid(30, 28, 14).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (3, 2, 6));
        assert_eq!(g.bounds(4), (28..30, 0..14));
        let g = build_patch_grid(896, 896, 14).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (64, 64, 4096));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            build_patch_grid(0, 10, 2),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_patch_grid(10, 10, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn extreme_masks() {
        let g = build_patch_grid(28, 28, 14).unwrap();
        let l = classify_patches(&g, &Mask::zeros(28, 28), true).unwrap();
        assert!(l.labels.iter().all(|&c| c == PatchClass::Affected));
        let l = classify_patches(&g, &Mask::ones(28, 28), true).unwrap();
        assert!(l.labels.iter().all(|&c| c == PatchClass::Tampered));
        let l = classify_patches(&g, &Mask::ones(28, 28), false).unwrap();
        assert!(l.labels.iter().all(|&c| c == PatchClass::Original));
    }

    #[test]
    fn single_corner_pixel() {
        let g = build_patch_grid(28, 28, 14).unwrap();
        let mut m = Mask::zeros(28, 28);
        m.set(0, 0, true);
        let l = classify_patches(&g, &m, true).unwrap();
        use PatchClass::*;
        assert_eq!(l.labels, vec![Tampered, Affected, Affected, Affected]);
    }

    #[test]
    fn shape_mismatch() {
        let g = build_patch_grid(28, 28, 14).unwrap();
        assert!(classify_patches(&g, &Mask::zeros(28, 27), true).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = (Mask, usize)> {
        (1usize..24, 1usize..24, 1usize..8).prop_flat_map(|(h, w, ps)| {
            proptest::collection::vec(proptest::bool::weighted(0.1), h * w)
                .prop_map(move |bits| (Mask::from_fn(h, w, |(r, c)| bits[r * w + c]), ps))
        })
    }

    proptest! {
        #[test]
        fn partition_and_every_pixel_once((mask, ps) in mask_strategy()) {
            let g = PatchGrid::new(mask.height(), mask.width(), ps).unwrap();
            let mut seen = vec![0usize; mask.height() * mask.width()];
            for i in 0..g.len() {
                let (rr, cc) = g.bounds(i);
                for r in rr { for c in cc.clone() { seen[r * mask.width() + c] += 1; } }
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
            let l = classify_patches(&g, &mask, true).unwrap();
            prop_assert_eq!(l.count(PatchClass::Tampered) + l.count(PatchClass::Affected), g.len());
        }

        #[test]
        fn adding_pixels_is_monotone((mask, ps) in mask_strategy(), extra in any::<u64>()) {
            let g = PatchGrid::new(mask.height(), mask.width(), ps).unwrap();
            let mut grown = mask.clone();
            let n = mask.height() * mask.width();
            let idx = (extra as usize) % n;
            grown.set(idx / mask.width(), idx % mask.width(), true);
            let before = classify_patches(&g, &mask, true).unwrap();
            let after = classify_patches(&g, &grown, true).unwrap();
            for (b, a) in before.labels.iter().zip(&after.labels) {
                if *b == PatchClass::Tampered {
                    prop_assert_eq!(*a, PatchClass::Tampered);
                }
            }
        }
    }
}
