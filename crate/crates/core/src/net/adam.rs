use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.step
    }

    /// One update. Tensors without a gradient are treated as having a zero
    /// gradient, so their moments still decay.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state for {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.len() || grads[i].is_some_and(|g| g.len() != p.len()) {
                return Err(Error::Shape(format!("adam tensor {i}: size mismatch")));
            }
            for j in 0..p.len() {
                let g = grads[i].map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_advances_time() {
        let mut adam = Adam::new(AdamConfig::default(), [3]);
        let mut p = vec![vec![1.0, -2.0, 0.5]];
        adam.step(&mut p, &[Some(&[0.0; 3])]).unwrap();
        assert_eq!(p[0], vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.timestep(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, [3]);
        let mut p = vec![vec![0.0; 3]];
        adam.step(&mut p, &[Some(&[3.0, -0.2, 1e-3])]).unwrap();
        for (x, s) in p[0].iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * cfg.lr).abs() < 1e-4 * cfg.lr, "{x}");
        }
    }

    #[test]
    fn three_step_scalar_trace() {
        // Minimize (x - 3)^2 from x = 0 with lr 0.1. Oracle values were
        // produced by a hand-rolled Adam in plain arithmetic.
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, [1]);
        let mut p = vec![vec![0.0]];
        let mut trace = Vec::new();
        for _ in 0..3 {
            let g = 2.0 * (p[0][0] - 3.0);
            adam.step(&mut p, &[Some(&[g])]).unwrap();
            trace.push(p[0][0]);
        }
        let oracle = [
            0.09999999983333335,
            0.19989729258521102,
            0.29961847654925267,
        ];
        for (a, b) in trace.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
