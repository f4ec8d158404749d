//! First-order optimizers over [`Params`].

use serde::{Deserialize, Serialize};

use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Momentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn momentum(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Momentum { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Global L2 norm over every tensor.
pub fn grad_norm(grads: &Params) -> f64 {
    grads.iter().flat_map(|(_, m)| m.data().iter()).map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    /// Rescale the gradient when its global norm exceeds this.
    clip: Option<f64>,
    first: Option<Params>,
    second: Option<Params>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, clip: Option<f64>) -> Self {
        Optimizer { config, clip, first: None, second: None, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Descends along `grads`; returns the pre-clipping gradient norm. Names in
    /// `grads` missing from `params` are ignored.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> f64 {
        let norm = grad_norm(grads);
        let scale = match self.clip {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let first = self.first.get_or_insert_with(|| grads.zeros_like());
        match self.config {
            OptimizerConfig::Momentum { lr, momentum } => {
                for (name, g) in grads.iter() {
                    if !params.contains(name) {
                        continue;
                    }
                    let v = first.get_mut(name);
                    for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                        *vi = momentum * *vi + gi * scale;
                    }
                    params.get_mut(name).add_scaled(v, -lr);
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let second = self.second.get_or_insert_with(|| grads.zeros_like());
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (name, g) in grads.iter() {
                    if !params.contains(name) {
                        continue;
                    }
                    let m = first.get_mut(name);
                    let v = second.get_mut(name);
                    let p = params.get_mut(name);
                    for (((mi, vi), gi), pi) in
                        m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()).zip(p.data_mut().iter_mut())
                    {
                        let gi = gi * scale;
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn quadratic_grad(p: &Params) -> Params {
        // f = sum (x - 3)^2
        let mut g = Params::new();
        g.insert("x", p.get("x").map(|v| 2.0 * (v - 3.0)));
        g
    }

    #[test]
    fn both_optimizers_reach_the_minimum() {
        for cfg in [OptimizerConfig::momentum(0.05, 0.9), OptimizerConfig::adam(0.1)] {
            let mut p = Params::new();
            p.insert("x", Matrix::from_vec(1, 3, vec![-2.0, 0.0, 10.0]));
            let mut opt = Optimizer::new(cfg, None);
            for _ in 0..500 {
                let g = quadratic_grad(&p);
                opt.step(&mut p, &g);
            }
            assert!(p.get("x").data().iter().all(|v| (v - 3.0).abs() < 1e-3), "{cfg:?}: {:?}", p.get("x"));
        }
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut p = Params::new();
        p.insert("x", Matrix::scalar(0.0));
        let mut g = Params::new();
        g.insert("x", Matrix::scalar(100.0));
        let mut opt = Optimizer::new(OptimizerConfig::momentum(1.0, 0.0), Some(1.0));
        assert_eq!(opt.step(&mut p, &g), 100.0);
        assert!((p.get("x").item() + 1.0).abs() < 1e-12);
    }
}
