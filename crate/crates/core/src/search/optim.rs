use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::{AdamConfig, SgdConfig};
use crate::linalg::Matrix;
use crate::supernet::tape::{Gradients, ParamKey};
use crate::supernet::Network;

/// Cosine annealing from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Momentum gradient descent over network parameters. Parameters without a
/// gradient in a step are left untouched, velocity included.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: BTreeMap<ParamKey, Matrix>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) {
        for (key, g) in grads {
            let Some(p) = net.param_mut(*key) else {
                continue;
            };
            let v = self
                .velocity
                .entry(*key)
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for ((pv, vv), gv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                let d = gv + self.config.weight_decay * *pv;
                *vv = self.config.momentum * *vv + d;
                *pv -= lr * *vv;
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adaptive moment optimizer for architecture vectors.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<ParamKey, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, key: ParamKey, param: &mut [f64], grad: &[f64]) {
        let c = &self.config;
        let s = self.state.entry(key).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        s.t += 1;
        let bc1 = 1.0 - c.beta1.powi(s.t);
        let bc2 = 1.0 - c.beta2.powi(s.t);
        for i in 0..param.len() {
            let g = grad[i] + c.weight_decay * param[i];
            s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * g;
            s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g * g;
            let mh = s.m[i] / bc1;
            let vh = s.v[i] / bc2;
            param[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert_eq!(cosine_lr(0.1, 10, 10), 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut p = vec![1.0, -1.0];
        adam.step(ParamKey::Arch { kind: 0, node: 0 }, &mut p, &[2.0, -0.5]);
        let lr = AdamConfig::default().lr;
        assert!((p[0] - (1.0 - lr)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + lr)).abs() < 1e-9);
    }
}
