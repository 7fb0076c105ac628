//! Projection head and the three-class patch contrastive objective.
//!
//! Every projected patch embedding is an anchor. Its positives are all other
//! embeddings with the same label (original, tampered or affected), and the
//! loss is the sum over anchors of the mean negative log-probability of the
//! positives under a softmax over every other embedding. Anchors with no
//! positive contribute nothing.

use ndarray::{Array2, Axis, Zip};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::FeatureSequence;
use crate::error::{Error, Result};
use crate::impl_params;
use crate::nn::{Mlp, MlpCache, Pass};
use crate::patchgrid::{PatchClass, PatchLabels};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub mlp: Mlp,
    /// L2-normalise embeddings (rows of zero norm are rejected).
    pub normalize: bool,
}

impl_params!(ProjectionHead; mlp);

pub struct ProjectionCache {
    mlp: MlpCache,
    raw: Array2<f64>,
    norms: Option<ndarray::Array1<f64>>,
}

impl ProjectionHead {
    pub fn new(
        feature_dim: usize,
        hidden: usize,
        embed_dim: usize,
        normalize: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ProjectionHead {
            mlp: Mlp::new(feature_dim, hidden, embed_dim, 0.0, &mut rng),
            normalize,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.fc1.inputs()
    }

    pub fn embed_dim(&self) -> usize {
        self.mlp.fc2.outputs()
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        pass: &mut Pass,
    ) -> Result<(Array2<f64>, ProjectionCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "projection head expects width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let (raw, mlp) = self.mlp.forward(x, pass);
        if !self.normalize {
            return Ok((
                raw.clone(),
                ProjectionCache {
                    mlp,
                    raw,
                    norms: None,
                },
            ));
        }
        let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
            return Err(Error::invalid(format!(
                "embedding {i} has zero or non-finite norm and cannot be normalised"
            )));
        }
        let z = &raw / &norms.view().insert_axis(Axis(1));
        Ok((
            z,
            ProjectionCache {
                mlp,
                raw,
                norms: Some(norms),
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ProjectionCache,
        dz: &Array2<f64>,
        grad: &mut ProjectionHead,
    ) -> Array2<f64> {
        let draw = match &cache.norms {
            None => dz.clone(),
            Some(norms) => {
                // d(u/|u|) = (dz - z (z·dz)) / |u|
                let mut out = dz.clone();
                Zip::from(out.rows_mut())
                    .and(cache.raw.rows())
                    .and(norms)
                    .for_each(|mut o, u, &n| {
                        let z = &u / n;
                        let dot = z.dot(&o);
                        Zip::from(&mut o)
                            .and(&z)
                            .for_each(|v, &zz| *v = (*v - zz * dot) / n);
                    });
                out
            }
        };
        self.mlp.backward(&cache.mlp, &draw, &mut grad.mlp)
    }

    /// Projects a fused sequence into the embedding space (inference mode).
    pub fn project(&self, fx: &FeatureSequence) -> Result<Array2<f64>> {
        Ok(self.forward(&fx.features, &mut Pass::Eval)?.0)
    }
}

/// How the affected class enters the contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SclMode {
    On,
    Off,
    NoAffected,
    #[serde(rename = "affected-as-orig")]
    AffectedAsOriginal,
}

impl SclMode {
    /// Class used in the loss, or `None` when the row is dropped.
    pub fn relabel(self, class: PatchClass) -> Option<PatchClass> {
        match (self, class) {
            (SclMode::NoAffected, PatchClass::Affected) => None,
            (SclMode::AffectedAsOriginal, PatchClass::Affected) => Some(PatchClass::Original),
            (_, c) => Some(c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SourceIndex {
    pub batch_item: usize,
    pub image: usize,
    pub patch: usize,
}

#[derive(Clone, Debug)]
pub struct LabeledEmbeddings {
    pub embeddings: Array2<f64>,
    pub labels: Vec<PatchClass>,
    pub source_index: Vec<SourceIndex>,
}

/// Embeddings and patch labels of one image of a batch.
pub struct ImageEmbeddings<'a> {
    pub batch_item: usize,
    pub image: usize,
    pub embeddings: &'a Array2<f64>,
    pub labels: &'a PatchLabels,
}

/// Picks the rows entering the loss: relabels per `mode`, then keeps at most
/// `cap` rows per class, drawn uniformly without replacement. The result is
/// sorted by source index.
pub fn select_rows(
    labels: &[(SourceIndex, PatchClass)],
    cap: Option<usize>,
    mode: SclMode,
    seed: u64,
) -> Vec<(SourceIndex, PatchClass)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for class in PatchClass::ALL {
        let members: Vec<_> = labels
            .iter()
            .filter_map(|&(src, c)| mode.relabel(c).filter(|&r| r == class).map(|r| (src, r)))
            .collect();
        match cap {
            Some(cap) if members.len() > cap => {
                let mut picked = index::sample(&mut rng, members.len(), cap).into_vec();
                picked.sort_unstable();
                out.extend(picked.into_iter().map(|i| members[i]));
            }
            _ => out.extend(members),
        }
    }
    out.sort();
    out
}

/// Gathers labelled embeddings over a batch of images.
pub fn collect_embeddings(
    images: &[ImageEmbeddings],
    cap: Option<usize>,
    mode: SclMode,
    seed: u64,
) -> Result<LabeledEmbeddings> {
    let mut all = Vec::new();
    for img in images {
        if img.embeddings.nrows() != img.labels.labels.len() {
            return Err(Error::invalid(
                "embedding rows and patch labels differ in length",
            ));
        }
        for (patch, &c) in img.labels.labels.iter().enumerate() {
            all.push((
                SourceIndex {
                    batch_item: img.batch_item,
                    image: img.image,
                    patch,
                },
                c,
            ));
        }
    }
    let picked = select_rows(&all, cap, mode, seed);
    let width = images.first().map(|i| i.embeddings.ncols()).unwrap_or(0);
    let mut embeddings = Array2::zeros((picked.len(), width));
    for (row, (src, _)) in picked.iter().enumerate() {
        let img = images
            .iter()
            .find(|i| i.batch_item == src.batch_item && i.image == src.image)
            .expect("source image present");
        embeddings
            .row_mut(row)
            .assign(&img.embeddings.row(src.patch));
    }
    Ok(LabeledEmbeddings {
        embeddings,
        labels: picked.iter().map(|p| p.1).collect(),
        source_index: picked.iter().map(|p| p.0).collect(),
    })
}

/// Contrastive loss value.
pub fn supcon_loss(
    embeddings: &Array2<f64>,
    labels: &[PatchClass],
    temperature: f64,
) -> Result<f64> {
    Ok(supcon_loss_grad(embeddings, labels, temperature)?.0)
}

/// Contrastive loss and its gradient with respect to the embeddings.
pub fn supcon_loss_grad(
    embeddings: &Array2<f64>,
    labels: &[PatchClass],
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    let m = embeddings.nrows();
    if m < 2 {
        return Err(Error::invalid(format!(
            "contrastive loss needs at least 2 embeddings, got {m}"
        )));
    }
    if labels.len() != m {
        return Err(Error::invalid("label count differs from embedding count"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut counts = [0usize; 3];
    for l in labels {
        counts[l.index()] += 1;
    }
    // Similarities, overwritten row by row with dL/ds.
    let mut g = embeddings.dot(&embeddings.t()) / temperature;
    let mut loss = 0.0;
    for (i, mut row) in g.rows_mut().into_iter().enumerate() {
        let positives = counts[labels[i].index()] - 1;
        if positives == 0 {
            row.fill(0.0);
            continue;
        }
        let max = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .fold(f64::NEG_INFINITY, |a, (_, &v)| a.max(v));
        let mut denom = 0.0;
        let mut pos_sum = 0.0;
        for (k, &v) in row.iter().enumerate() {
            if k == i {
                continue;
            }
            denom += (v - max).exp();
            if labels[k] == labels[i] {
                pos_sum += v;
            }
        }
        let lse = max + denom.ln();
        let inv_pos = 1.0 / positives as f64;
        loss += lse - pos_sum * inv_pos;
        for (k, v) in row.iter_mut().enumerate() {
            if k == i {
                *v = 0.0;
                continue;
            }
            let p = (*v - max).exp() / denom;
            *v = if labels[k] == labels[i] {
                p - inv_pos
            } else {
                p
            };
        }
    }
    let sym = &g + &g.t();
    let grad = sym.dot(embeddings) / temperature;
    Ok((loss, grad))
}
