use serde::{Deserialize, Serialize};

/// NAdam (Adam with Nesterov momentum and momentum-decay schedule).
///
/// Weight decay is applied as an L2 term added to the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum_decay: f64,
    pub step: u64,
    mu_product: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl NAdam {
    pub fn new(num_params: usize, lr: f64, weight_decay: f64) -> Self {
        NAdam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            momentum_decay: 4e-3,
            step: 0,
            mu_product: 1.0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn num_params(&self) -> usize {
        self.m.len()
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let mu = self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t * self.momentum_decay));
        let mu_next = self.beta1 * (1.0 - 0.5 * 0.96f64.powf((t + 1.0) * self.momentum_decay));
        self.mu_product *= mu;
        let bias2 = 1.0 - self.beta2.powf(t);
        let c_grad = self.lr * (1.0 - mu) / (1.0 - self.mu_product);
        let c_mom = self.lr * mu_next / (1.0 - self.mu_product * mu_next);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let denom = (self.v[i] / bias2).sqrt() + self.eps;
            params[i] -= c_grad * g / denom + c_mom * self.m[i] / denom;
        }
    }
}
