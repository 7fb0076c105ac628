//! Fusion block: symmetric cross-attention between the semantic and
//! geometry sequences, residual merge, and a patchwise GELU MLP followed by
//! a final layer norm.
//!
//! With the default `as_written` convention the keys of one modality meet
//! the queries and values of the other:
//!
//! ```text
//! F_{S<-G} = MH_{S<-G}(K = LN(F_S), Q = LN(F_G), V = LN(F_G))
//! F_{G<-S} = MH_{G<-S}(K = LN(F_G), Q = LN(F_S), V = LN(F_S))
//! f_M      = LN(MLP([f_S + f_{S<-G}, f_G + f_{G<-S}]))
//! ```
//!
//! `q_from_self` swaps to the usual cross-attention reading, where each
//! modality queries the other's keys and values.

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::impl_params;
use crate::nn::{
    AttentionCache, LayerNorm, LayerNormCache, Mlp, MlpCache, MultiHeadAttention, Pass,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "xattn")]
    CrossAttention,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "sum")]
    Sum,
    #[serde(rename = "semantic-only")]
    SemanticOnly,
    #[serde(rename = "geometry-only")]
    GeometryOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionConvention {
    AsWritten,
    QFromSelf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub num_heads: usize,
    pub feature_dim: usize,
    pub mlp_hidden: usize,
    pub dropout_rate: f64,
    pub mode: FusionMode,
    pub attention_convention: AttentionConvention,
}

impl FusionParams {
    pub fn new(feature_dim: usize) -> Self {
        FusionParams {
            num_heads: 8,
            feature_dim,
            mlp_hidden: 2 * feature_dim,
            dropout_rate: 0.1,
            mode: FusionMode::CrossAttention,
            attention_convention: AttentionConvention::AsWritten,
        }
    }

    fn mlp_inputs(&self) -> usize {
        match self.mode {
            FusionMode::CrossAttention | FusionMode::Concat => 2 * self.feature_dim,
            _ => self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.num_heads == 0
            || !self.feature_dim.is_multiple_of(self.num_heads)
        {
            return Err(Error::invalid(format!(
                "feature dim {} must be a positive multiple of {} heads",
                self.feature_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossParts {
    pub ln_s: LayerNorm,
    pub ln_g: LayerNorm,
    pub attn_sg: MultiHeadAttention,
    pub attn_gs: MultiHeadAttention,
}

impl_params!(CrossParts; ln_s, ln_g, attn_sg, attn_gs);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionBlock {
    pub config: FusionParams,
    pub cross: Option<CrossParts>,
    pub mlp: Mlp,
    pub ln_out: LayerNorm,
}

impl_params!(FusionBlock; cross, mlp, ln_out);

/// Outputs of the two attention directions plus their per-head weights.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub s_from_g: Array2<f64>,
    pub g_from_s: Array2<f64>,
    pub weights_sg: Vec<Array2<f64>>,
    pub weights_gs: Vec<Array2<f64>>,
}

struct CrossCache {
    ln_s: LayerNormCache,
    ln_g: LayerNormCache,
    sg: AttentionCache,
    gs: AttentionCache,
}

pub struct FusionCache {
    cross: Option<CrossCache>,
    mlp: MlpCache,
    ln_out: LayerNormCache,
}

impl FusionBlock {
    pub fn new(config: FusionParams, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let cross = (config.mode == FusionMode::CrossAttention).then(|| CrossParts {
            ln_s: LayerNorm::new(d),
            ln_g: LayerNorm::new(d),
            attn_sg: MultiHeadAttention::new(d, config.num_heads, config.dropout_rate, &mut rng),
            attn_gs: MultiHeadAttention::new(d, config.num_heads, config.dropout_rate, &mut rng),
        });
        let mlp = Mlp::new(
            config.mlp_inputs(),
            config.mlp_hidden,
            d,
            config.dropout_rate,
            &mut rng,
        );
        Ok(FusionBlock {
            cross,
            mlp,
            ln_out: LayerNorm::new(d),
            config,
        })
    }

    fn check_inputs(&self, fs: &Array2<f64>, fg: &Array2<f64>) -> Result<()> {
        let d = self.config.feature_dim;
        if fs.dim() != fg.dim() {
            return Err(Error::invalid(format!(
                "semantic {:?} and geometry {:?} sequences differ in shape",
                fs.dim(),
                fg.dim()
            )));
        }
        if fs.ncols() != d {
            return Err(Error::invalid(format!(
                "expected feature dim {d}, got {}",
                fs.ncols()
            )));
        }
        Ok(())
    }

    fn attend(
        &self,
        cross: &CrossParts,
        fs: &Array2<f64>,
        fg: &Array2<f64>,
        pass: &mut Pass,
    ) -> (Array2<f64>, Array2<f64>, CrossCache) {
        let (s, ln_s) = cross.ln_s.forward(fs);
        let (g, ln_g) = cross.ln_g.forward(fg);
        let ((sg_out, sg), (gs_out, gs)) = match self.config.attention_convention {
            AttentionConvention::AsWritten => (
                cross.attn_sg.forward(&g, &s, &g, pass),
                cross.attn_gs.forward(&s, &g, &s, pass),
            ),
            AttentionConvention::QFromSelf => (
                cross.attn_sg.forward(&s, &g, &g, pass),
                cross.attn_gs.forward(&g, &s, &s, pass),
            ),
        };
        (sg_out, gs_out, CrossCache { ln_s, ln_g, sg, gs })
    }

    /// Both attention directions on raw (un-normalised) inputs.
    pub fn cross_attend(
        &self,
        fs: &FeatureSequence,
        fg: &FeatureSequence,
    ) -> Result<CrossAttention> {
        self.check_inputs(&fs.features, &fg.features)?;
        let cross = self
            .cross
            .as_ref()
            .ok_or_else(|| Error::invalid("fusion block was built without cross-attention"))?;
        let (s_from_g, g_from_s, cache) =
            self.attend(cross, &fs.features, &fg.features, &mut Pass::Eval);
        Ok(CrossAttention {
            s_from_g,
            g_from_s,
            weights_sg: cache.sg.weights,
            weights_gs: cache.gs.weights,
        })
    }

    pub fn forward(
        &self,
        fs: &Array2<f64>,
        fg: &Array2<f64>,
        pass: &mut Pass,
    ) -> Result<(Array2<f64>, FusionCache)> {
        self.check_inputs(fs, fg)?;
        let (mlp_in, cross_cache) = match self.config.mode {
            FusionMode::CrossAttention => {
                let cross = self
                    .cross
                    .as_ref()
                    .expect("cross-attention parts present in xattn mode");
                let (sg, gs, cache) = self.attend(cross, fs, fg, pass);
                let merged = concatenate![Axis(1), fs + &sg, fg + &gs];
                (merged, Some(cache))
            }
            FusionMode::Concat => (concatenate![Axis(1), *fs, *fg], None),
            FusionMode::Sum => (fs + fg, None),
            FusionMode::SemanticOnly => (fs.clone(), None),
            FusionMode::GeometryOnly => (fg.clone(), None),
        };
        let (h, mlp) = self.mlp.forward(&mlp_in, pass);
        let (out, ln_out) = self.ln_out.forward(&h);
        Ok((
            out,
            FusionCache {
                cross: cross_cache,
                mlp,
                ln_out,
            },
        ))
    }

    /// Accumulates parameter gradients. Encoder inputs are frozen, so no
    /// input gradient is returned.
    pub fn backward(&self, cache: &FusionCache, dout: &Array2<f64>, grad: &mut FusionBlock) {
        let dh = self.ln_out.backward(&cache.ln_out, dout, &mut grad.ln_out);
        let dmlp_in = self.mlp.backward(&cache.mlp, &dh, &mut grad.mlp);
        let (Some(cross), Some(cc), Some(gcross)) =
            (&self.cross, &cache.cross, grad.cross.as_mut())
        else {
            return;
        };
        let d = self.config.feature_dim;
        let d_sg = dmlp_in.slice(s![.., ..d]).to_owned();
        let d_gs = dmlp_in.slice(s![.., d..]).to_owned();
        let (q1, k1, v1) = cross.attn_sg.backward(&cc.sg, &d_sg, &mut gcross.attn_sg);
        let (q2, k2, v2) = cross.attn_gs.backward(&cc.gs, &d_gs, &mut gcross.attn_gs);
        let (ds, dg) = match self.config.attention_convention {
            AttentionConvention::AsWritten => (k1 + &q2 + &v2, q1 + &v1 + &k2),
            AttentionConvention::QFromSelf => (q1 + &k2 + &v2, k1 + &v1 + &q2),
        };
        cross.ln_s.backward(&cc.ln_s, &ds, &mut gcross.ln_s);
        cross.ln_g.backward(&cc.ln_g, &dg, &mut gcross.ln_g);
    }

    /// Inference-mode fusion of two encoder sequences.
    pub fn fuse(&self, fs: &FeatureSequence, fg: &FeatureSequence) -> Result<FeatureSequence> {
        if fs.grid != fg.grid {
            return Err(Error::invalid("semantic and geometry grids differ"));
        }
        let (out, _) = self.forward(&fs.features, &fg.features, &mut Pass::Eval)?;
        FeatureSequence::new(out, fs.grid, Modality::Fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, Linear, Params};
    use crate::patchgrid::PatchGrid;
    use rand::Rng;

    fn random(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn params(d: usize, heads: usize, mode: FusionMode) -> FusionParams {
        FusionParams {
            num_heads: heads,
            feature_dim: d,
            mlp_hidden: 2 * d,
            dropout_rate: 0.0,
            mode,
            attention_convention: AttentionConvention::AsWritten,
        }
    }

    fn seq(x: Array2<f64>, modality: Modality) -> FeatureSequence {
        let n = x.nrows();
        FeatureSequence::new(x, PatchGrid::new(1, n, 1).unwrap(), modality).unwrap()
    }

    #[test]
    fn single_token_attention_returns_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = FusionBlock::new(params(8, 2, FusionMode::CrossAttention), 2).unwrap();
        let fs = seq(random((1, 8), &mut rng), Modality::Semantic);
        let fg = seq(random((1, 8), &mut rng), Modality::Geometry);
        let out = block.cross_attend(&fs, &fg).unwrap();
        for w in out.weights_sg.iter().chain(&out.weights_gs) {
            assert_eq!(w[[0, 0]], 1.0);
        }
        let cross = block.cross.as_ref().unwrap();
        let g = cross.ln_g.forward(&fg.features).0;
        let expected = cross.attn_sg.wo.forward(&cross.attn_sg.wv.forward(&g));
        assert!((&out.s_from_g - &expected).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = FusionBlock::new(params(8, 2, FusionMode::CrossAttention), 2).unwrap();
        let a = random((3, 8), &mut rng);
        let b = random((4, 8), &mut rng);
        assert!(block.forward(&a, &b, &mut Pass::Eval).is_err());
        let c = random((3, 6), &mut rng);
        assert!(block.forward(&c, &c, &mut Pass::Eval).is_err());
        assert!(FusionBlock::new(params(10, 4, FusionMode::Sum), 0).is_err());
    }

    #[test]
    fn output_width_in_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random((5, 16), &mut rng), random((5, 16), &mut rng));
        for mode in [
            FusionMode::CrossAttention,
            FusionMode::Concat,
            FusionMode::Sum,
            FusionMode::SemanticOnly,
            FusionMode::GeometryOnly,
        ] {
            let block = FusionBlock::new(params(16, 8, mode), 3).unwrap();
            let out = block
                .fuse(
                    &seq(a.clone(), Modality::Semantic),
                    &seq(b.clone(), Modality::Geometry),
                )
                .unwrap();
            assert_eq!(out.features.dim(), (5, 16));
            assert_eq!(out.modality, Modality::Fused);
        }
    }

    #[test]
    fn sum_mode_zero_geometry_identity_mlp_is_layer_norm() {
        // GELU(x) - GELU(-x) = x, so W1 = [I, -I], W2 = [I; -I] is an exact
        // identity through the hidden layer of width 2D.
        let d = 6;
        let mut block = FusionBlock::new(params(d, 2, FusionMode::Sum), 5).unwrap();
        let eye = Array2::<f64>::eye(d);
        let mut fc1 = Linear::zeros(d, 2 * d);
        fc1.weight = concatenate![Axis(1), eye, -&eye];
        let mut fc2 = Linear::zeros(2 * d, d);
        fc2.weight = concatenate![Axis(0), eye, -&eye];
        block.mlp.fc1 = fc1;
        block.mlp.fc2 = fc2;

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fs = random((4, d), &mut rng) * 3.0;
        let (out, _) = block
            .forward(&fs, &Array2::zeros((4, d)), &mut Pass::Eval)
            .unwrap();
        let expected = LayerNorm::new(d).forward(&fs).0;
        assert!((&out - &expected).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for convention in [
            AttentionConvention::AsWritten,
            AttentionConvention::QFromSelf,
        ] {
            let mut p = params(8, 2, FusionMode::CrossAttention);
            p.attention_convention = convention;
            let block = FusionBlock::new(p, 9).unwrap();
            let (fs, fg) = (random((5, 8), &mut rng), random((5, 8), &mut rng));
            let w = random((5, 8), &mut rng);
            let (_, cache) = block.forward(&fs, &fg, &mut Pass::Eval).unwrap();
            let mut g = block.zeroed();
            block.backward(&cache, &w, &mut g);
            let err = gradient_check(
                |flat| {
                    let mut b = block.clone();
                    b.load_flat(flat);
                    (&b.forward(&fs, &fg, &mut Pass::Eval).unwrap().0 * &w).sum()
                },
                &block.flatten(),
                &g.flatten(),
                1e-5,
                1e-6,
            );
            assert!(err < 1e-4, "{convention:?}: {err}");
        }
    }
}
