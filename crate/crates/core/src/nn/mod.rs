//! Minimal dense layers with hand-written backward passes.
//!
//! Every layer keeps its parameters in standard-layout `f64` arrays and
//! implements [`Params`], so a model can be flattened into one vector for the
//! optimiser, for checkpoints and for finite-difference gradient checks.
//! Gradients are accumulated into a zeroed clone of the layer itself.

mod attention;
mod layers;
mod optim;

pub use attention::{AttentionCache, MultiHeadAttention};
pub use layers::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache};
pub use optim::NAdam;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Forward-pass mode. Dropout is only active in training passes, which carry
/// the generator that draws the dropout masks.
pub enum Pass<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }

    /// Inverted-dropout mask (entries 0 or 1/(1-p)), `None` when inactive.
    pub fn dropout_mask(&mut self, shape: (usize, usize), rate: f64) -> Option<Array2<f64>> {
        match self {
            Pass::Train(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                Some(Array2::from_shape_fn(shape, |_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                }))
            }
            _ => None,
        }
    }
}

pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        assert_eq!(
            offset,
            flat.len(),
            "flat parameter vector has the wrong length"
        );
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |s| s.fill(0.0));
        z
    }

    fn add_assign_params(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |s| {
            for (a, b) in s.iter_mut().zip(&flat[offset..]) {
                *a += b;
            }
            offset += s.len();
        });
    }

    /// Order-sensitive checksum of the raw parameter bits.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        self.visit(&mut |s| {
            for v in s {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        });
        h
    }
}

impl Params for Array2<f64> {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self
            .as_slice()
            .expect("parameters are kept in standard layout"))
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self
            .as_slice_mut()
            .expect("parameters are kept in standard layout"))
    }
}

impl Params for Array1<f64> {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self
            .as_slice()
            .expect("parameters are kept in standard layout"))
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self
            .as_slice_mut()
            .expect("parameters are kept in standard layout"))
    }
}

impl<T: Params> Params for Option<T> {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        if let Some(p) = self {
            p.visit(f)
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        if let Some(p) = self {
            p.visit_mut(f)
        }
    }
}

/// Implements [`Params`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_params {
    ($ty:ty; $($field:ident),+ $(,)?) => {
        impl $crate::nn::Params for $ty {
            fn visit(&self, f: &mut dyn FnMut(&[f64])) {
                $( $crate::nn::Params::visit(&self.$field, f); )+
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
                $( $crate::nn::Params::visit_mut(&mut self.$field, f); )+
            }
        }
    };
}

/// Xavier-uniform matrix.
pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

/// Max relative error between an analytic gradient and central finite
/// differences of `f` around `x0`. Entries where both are below `floor`
/// are compared absolutely against `floor`.
pub fn gradient_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
) -> f64 {
    let mut x = x0.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
