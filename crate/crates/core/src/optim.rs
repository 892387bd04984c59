//! Adam with optional global-norm gradient clipping.

use crate::autograd::ParamSet;
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(5.0) }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Adam { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `frozen` parameters (by index) are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix], frozen: &[bool]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let c = &self.config;
        let norm = grads.iter().map(|g| g.data.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let scale = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let b1t = 1.0 - c.beta1.powi(self.t as i32);
        let b2t = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let (m, v, g) = (&mut self.m[i].data, &mut self.v[i].data, &grads[i].data);
            for e in 0..p.data.len() {
                let ge = g[e] * scale;
                m[e] = c.beta1 * m[e] + (1.0 - c.beta1) * ge;
                v[e] = c.beta2 * v[e] + (1.0 - c.beta2) * ge * ge;
                p.data[e] -= c.lr * (m[e] / b1t) / ((v[e] / b2t).sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.add("x", Matrix::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &p);
        for _ in 0..500 {
            let g = vec![p.values()[0].map(|x| 2.0 * x)];
            opt.step(&mut p, &g, &[]);
        }
        assert!(p.values()[0].max_abs() < 1e-2);
    }

    #[test]
    fn frozen_params_stay_put() {
        let mut p = ParamSet::new();
        p.add("a", Matrix::row_vector(vec![1.0]));
        p.add("b", Matrix::row_vector(vec![1.0]));
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let g = vec![Matrix::row_vector(vec![1.0]), Matrix::row_vector(vec![1.0])];
        opt.step(&mut p, &g, &[true, false]);
        assert_eq!(p.values()[0].data[0], 1.0);
        assert!(p.values()[1].data[0] < 1.0);
    }
}
