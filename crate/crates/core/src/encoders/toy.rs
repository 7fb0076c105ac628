use image::RgbImage;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{modality_channels, patch_vectors, Encoder, EncoderBackendSpec, FeatureSequence};
use crate::error::Result;
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention, Params, Pass};
use crate::patchgrid::PatchGrid;

const DEPTH: usize = 2;
const HEADS: usize = 4;
const POSITION_SCALE: f64 = 0.1;

#[derive(Clone)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

crate::impl_params!(Block; ln1, attn, ln2, mlp);

/// A small pre-norm vision transformer with seeded random weights that are
/// never updated.
pub struct ToyTransformer {
    spec: EncoderBackendSpec,
    embed: Linear,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
}

impl ToyTransformer {
    pub fn new(spec: EncoderBackendSpec) -> Self {
        let d = spec.feature_dim;
        let heads = if d.is_multiple_of(HEADS) { HEADS } else { 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let embed = Linear::new(3 * spec.patch_size * spec.patch_size, d, &mut rng);
        let blocks = (0..DEPTH)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                attn: MultiHeadAttention::new(d, heads, 0.0, &mut rng),
                ln2: LayerNorm::new(d),
                mlp: Mlp::new(d, 2 * d, d, 0.0, &mut rng),
            })
            .collect();
        ToyTransformer {
            spec,
            embed,
            blocks,
            ln_final: LayerNorm::new(d),
        }
    }
}

/// Fixed 2-D sinusoidal position code: first half of the channels encodes
/// the patch row, second half the column.
fn position_code(grid: &PatchGrid, d: usize) -> Array2<f64> {
    let half = (d / 2).max(1);
    Array2::from_shape_fn((grid.len(), d), |(n, k)| {
        let (pos, k) = if k < half {
            (n / grid.cols, k)
        } else {
            (n % grid.cols, k - half)
        };
        let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
        let angle = pos as f64 * freq;
        POSITION_SCALE * if k % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

impl Encoder for ToyTransformer {
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
        let mut x = self.embed.forward(&patches) + position_code(&grid, self.spec.feature_dim);
        for b in &self.blocks {
            let h = b.ln1.forward(&x).0;
            x = x + b.attn.forward(&h, &h, &h, &mut Pass::Eval).0;
            let h = b.ln2.forward(&x).0;
            x = x + b.mlp.forward(&h, &mut Pass::Eval).0;
        }
        let out = self.ln_final.forward(&x).0;
        FeatureSequence::new(out, grid, self.spec.modality)
    }

    fn checksum(&self) -> u64 {
        let mut h = self.embed.checksum() ^ self.ln_final.checksum().rotate_left(7);
        for (i, b) in self.blocks.iter().enumerate() {
            h ^= b.checksum().rotate_left(13 * (i as u32 + 1));
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{BackendKind, Modality};
    use image::Rgb;

    #[test]
    fn frozen_and_deterministic() {
        let spec =
            EncoderBackendSpec::new(BackendKind::ToyTransformer, Modality::Semantic, 8, 16, 7);
        let enc = ToyTransformer::new(spec.clone());
        let img = RgbImage::from_fn(24, 20, |x, y| Rgb([(x * 9) as u8, (y * 11) as u8, 100]));
        let before = enc.checksum();
        let a = enc.encode(&img).unwrap();
        let b = enc.encode(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(enc.checksum(), before);
        assert_eq!((a.len(), a.dim()), (9, 16));
        // Same seed, fresh instance.
        assert_eq!(ToyTransformer::new(spec).encode(&img).unwrap(), a);
    }
}
