use image::RgbImage;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Encoder, EncoderBackendSpec, FeatureSequence, Modality};
use crate::error::Result;
use crate::imageops;
use crate::nn::Params;
use crate::patchgrid::PatchGrid;

const HIST_BINS: usize = 4;
pub const SEMANTIC_DESCRIPTOR_LEN: usize = 3 * HIST_BINS + 3 + 3 + 1;
pub const GEOMETRY_DESCRIPTOR_LEN: usize = 8;

/// Per-patch colour and texture statistics: a 4-bin histogram per channel,
/// channel means and standard deviations, and mean absolute Laplacian.
pub fn semantic_descriptors(image: &RgbImage, grid: &PatchGrid) -> Array2<f64> {
    let planes = imageops::to_planes(image);
    let lap = imageops::laplacian(&imageops::luma(&planes));
    let mut out = Array2::zeros((grid.len(), SEMANTIC_DESCRIPTOR_LEN));
    for n in 0..grid.len() {
        let (rr, cc) = grid.bounds(n);
        let count = (rr.len() * cc.len()) as f64;
        let mut row = out.row_mut(n);
        for ch in 0..3 {
            let patch = planes.index_axis(Axis(0), ch);
            let patch = patch.slice(ndarray::s![rr.clone(), cc.clone()]);
            let mean = patch.sum() / count;
            let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            for &v in patch.iter() {
                let bin = ((v / 256.0 * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                row[ch * HIST_BINS + bin] += 1.0 / count;
            }
            row[3 * HIST_BINS + ch] = mean / 255.0;
            row[3 * HIST_BINS + 3 + ch] = var.sqrt() / 255.0;
        }
        let l = lap.slice(ndarray::s![rr, cc]);
        row[SEMANTIC_DESCRIPTOR_LEN - 1] = l.iter().map(|v| v.abs()).sum::<f64>() / count / 255.0;
    }
    out
}

struct EnergyMaps {
    grad_col: Array2<f64>,
    grad_row: Array2<f64>,
    lap: Array2<f64>,
}

impl EnergyMaps {
    fn new(l: &Array2<f64>) -> Self {
        let (grad_row, grad_col) = imageops::gradients(l);
        EnergyMaps {
            grad_col,
            grad_row,
            lap: imageops::laplacian(l),
        }
    }

    /// `[rms d/dcol, rms d/drow, rms laplacian, mean |grad|]` over a window.
    fn pool(&self, rr: std::ops::Range<usize>, cc: std::ops::Range<usize>) -> [f64; 4] {
        let sl = ndarray::s![rr, cc];
        let (gc, gr, lap) = (
            self.grad_col.slice(sl),
            self.grad_row.slice(sl),
            self.lap.slice(sl),
        );
        let n = gc.len().max(1) as f64;
        let rms =
            |a: ndarray::ArrayView2<f64>| (a.iter().map(|v| v * v).sum::<f64>() / n).sqrt() / 255.0;
        let mag = gr
            .iter()
            .zip(gc.iter())
            .map(|(a, b)| (a * a + b * b).sqrt())
            .sum::<f64>()
            / n
            / 255.0;
        [rms(gc), rms(gr), rms(lap), mag]
    }
}

/// Per-patch gradient and Laplacian energy at full and half resolution:
/// `[rms d/dcol, rms d/drow, rms laplacian, mean |grad|]` per level.
pub fn geometry_descriptors(image: &RgbImage, grid: &PatchGrid) -> Array2<f64> {
    let l0 = imageops::luma(&imageops::to_planes(image));
    let (h, w) = l0.dim();
    let (h1, w1) = (h.div_ceil(2), w.div_ceil(2));
    let l1 = Array2::from_shape_fn((h1, w1), |(r, c)| {
        let mut s = 0.0;
        let mut k = 0.0;
        for rr in 2 * r..(2 * r + 2).min(h) {
            for cc in 2 * c..(2 * c + 2).min(w) {
                s += l0[[rr, cc]];
                k += 1.0;
            }
        }
        s / k
    });
    let (m0, m1) = (EnergyMaps::new(&l0), EnergyMaps::new(&l1));
    let mut out = Array2::zeros((grid.len(), GEOMETRY_DESCRIPTOR_LEN));
    for n in 0..grid.len() {
        let (rr, cc) = grid.bounds(n);
        let r1 = rr.start / 2..rr.end.div_ceil(2).min(h1);
        let c1 = cc.start / 2..cc.end.div_ceil(2).min(w1);
        let mut row = out.row_mut(n);
        for (k, v) in m0
            .pool(rr, cc)
            .into_iter()
            .chain(m1.pool(r1, c1))
            .enumerate()
        {
            row[k] = v;
        }
    }
    out
}

/// Hand-crafted descriptors projected to D dimensions by a fixed seeded
/// Gaussian matrix.
pub struct Handcrafted {
    spec: EncoderBackendSpec,
    projection: Array2<f64>,
}

impl Handcrafted {
    pub fn new(spec: EncoderBackendSpec) -> Self {
        let len = match spec.modality {
            Modality::Geometry => GEOMETRY_DESCRIPTOR_LEN,
            _ => SEMANTIC_DESCRIPTOR_LEN,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = (1.0 / len as f64).sqrt();
        let projection = Array2::from_shape_fn((len, spec.feature_dim), |_| {
            let n: f64 = rng.sample(StandardNormal);
            n * scale
        });
        Handcrafted { spec, projection }
    }
}

impl Encoder for Handcrafted {
    fn spec(&self) -> &EncoderBackendSpec {
        &self.spec
    }

    fn encode(&self, image: &RgbImage) -> Result<FeatureSequence> {
        let grid = PatchGrid::new(
            image.height() as usize,
            image.width() as usize,
            self.spec.patch_size,
        )?;
        let desc = match self.spec.modality {
            Modality::Geometry => geometry_descriptors(image, &grid),
            _ => semantic_descriptors(image, &grid),
        };
        FeatureSequence::new(desc.dot(&self.projection), grid, self.spec.modality)
    }

    fn checksum(&self) -> u64 {
        self.projection.checksum()
    }
}
