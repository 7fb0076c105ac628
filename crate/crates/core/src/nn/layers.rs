use ndarray::{Array1, Array2, Axis, Zip};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{xavier, Pass};
use crate::impl_params;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `y = x W + b` with `W` stored as in×out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl_params!(Linear; weight, bias);

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: xavier(inputs, outputs, rng),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad`, returns dL/dx.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

/// Row-wise layer normalisation with learnable gain and shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

impl_params!(LayerNorm; gamma, beta);

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centred = x - &mean.view().insert_axis(Axis(1));
        let var = centred.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = centred * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        let d = dy.ncols() as f64;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(1));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1));
        let mut dx = dxhat * d;
        Zip::from(dx.rows_mut())
            .and(cache.xhat.rows())
            .and(&sum_dxhat)
            .and(&sum_dxhat_xhat)
            .and(&cache.inv_std)
            .for_each(|mut row, xh, &s1, &s2, &inv| {
                Zip::from(&mut row)
                    .and(&xh)
                    .for_each(|v, &h| *v = (*v - s1 - h * s2) * inv / d);
            });
        dx
    }
}

/// Two-layer patchwise MLP with GELU and dropout on the hidden activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl_params!(Mlp; fc1, fc2);

pub struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    drop: Option<Array2<f64>>,
    hidden: Array2<f64>,
}

impl Mlp {
    pub fn new(
        inputs: usize,
        hidden: usize,
        outputs: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(inputs, hidden, rng),
            fc2: Linear::new(hidden, outputs, rng),
            dropout,
        }
    }

    pub fn forward(&self, x: &Array2<f64>, pass: &mut Pass) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(x);
        let mut hidden = pre.mapv(gelu);
        let drop = pass.dropout_mask(hidden.dim(), self.dropout);
        if let Some(m) = &drop {
            hidden *= m;
        }
        let y = self.fc2.forward(&hidden);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                drop,
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut dh = self.fc2.backward(&cache.hidden, dy, &mut grad.fc2);
        if let Some(m) = &cache.drop {
            dh *= m;
        }
        Zip::from(&mut dh)
            .and(&cache.pre)
            .for_each(|g, &p| *g *= gelu_grad(p));
        self.fc1.backward(&cache.x, &dh, &mut grad.fc1)
    }
}
