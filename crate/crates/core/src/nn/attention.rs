use ndarray::{s, Array2, Axis, Zip};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Linear, Pass};
use crate::impl_params;

/// Multi-head scaled dot-product attention with separate query, key and
/// value sources. Heads split the columns of shared D×D projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl_params!(MultiHeadAttention; wq, wk, wv, wo);

pub struct AttentionCache {
    q_src: Array2<f64>,
    k_src: Array2<f64>,
    v_src: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights per head, rows indexed by query.
    pub weights: Vec<Array2<f64>>,
    drops: Vec<Option<Array2<f64>>>,
    concat: Array2<f64>,
}

pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "feature dim must be divisible by heads"
        );
        MultiHeadAttention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            heads,
            dropout,
        }
    }

    fn head_dim(&self) -> usize {
        self.wq.outputs() / self.heads
    }

    /// Queries index the output rows; keys and values must have equal length.
    pub fn forward(
        &self,
        q_src: &Array2<f64>,
        k_src: &Array2<f64>,
        v_src: &Array2<f64>,
        pass: &mut Pass,
    ) -> (Array2<f64>, AttentionCache) {
        let q = self.wq.forward(q_src);
        let k = self.wk.forward(k_src);
        let v = self.wv.forward(v_src);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Array2::zeros((q.nrows(), q.ncols()));
        let mut weights = Vec::with_capacity(self.heads);
        let mut drops = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut a);
            let drop = pass.dropout_mask(a.dim(), self.dropout);
            let out = match &drop {
                Some(m) => (&a * m).dot(&v.slice(cols)),
                None => a.dot(&v.slice(cols)),
            };
            concat.slice_mut(cols).assign(&out);
            weights.push(a);
            drops.push(drop);
        }
        let y = self.wo.forward(&concat);
        (
            y,
            AttentionCache {
                q_src: q_src.clone(),
                k_src: k_src.clone(),
                v_src: v_src.clone(),
                q,
                k,
                v,
                weights,
                drops,
                concat,
            },
        )
    }

    /// Returns gradients for the query, key and value sources.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        grad: &mut MultiHeadAttention,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let dconcat = self.wo.backward(&cache.concat, dy, &mut grad.wo);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &cache.weights[h];
            let dout = dconcat.slice(cols);
            let mut da = dout.dot(&cache.v.slice(cols).t());
            match &cache.drops[h] {
                Some(m) => {
                    dv.slice_mut(cols).assign(&(a * m).t().dot(&dout));
                    da *= m;
                }
                None => dv.slice_mut(cols).assign(&a.t().dot(&dout)),
            }
            // Softmax backward: dS = A ∘ (dA − rowsum(dA ∘ A)).
            let row_dot = (&da * a).sum_axis(Axis(1));
            let mut ds = da;
            Zip::from(ds.rows_mut())
                .and(a.rows())
                .and(&row_dot)
                .for_each(|mut d, ar, &rd| {
                    Zip::from(&mut d)
                        .and(&ar)
                        .for_each(|x, &p| *x = p * (*x - rd) * scale);
                });
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let dq_src = self.wq.backward(&cache.q_src, &dq, &mut grad.wq);
        let dk_src = self.wk.backward(&cache.k_src, &dk, &mut grad.wk);
        let dv_src = self.wv.backward(&cache.v_src, &dv, &mut grad.wv);
        (dq_src, dk_src, dv_src)
    }
}
