//! Adam optimizer over a [`ParamSet`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescales the whole gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients; gradients are left in place.
    pub fn step(&mut self, ps: &mut ParamSet) {
        self.t += 1;
        let c = &self.cfg;
        let mut scale = 1.0;
        if let Some(max) = c.clip_norm {
            let norm = ps
                .iter()
                .filter_map(|(_, t)| t.grad.as_ref())
                .flat_map(|g| g.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                scale = max / norm;
            }
        }
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, t) in ps.iter_mut() {
            let Some(g) = &t.grad else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                t.data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn quad(ps: &ParamSet) -> f64 {
        let x = &ps.get("x").unwrap().data;
        (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2)
    }

    fn fill_grad(ps: &mut ParamSet) {
        let t = ps.get_mut("x").unwrap();
        let x = t.data.clone();
        t.grad = Some(vec![2.0 * (x[0] - 1.0), 6.0 * (x[1] + 2.0)]);
    }

    #[test]
    fn step_reduces_convex_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::new(vec![2], vec![4.0, 3.0]).unwrap().trainable());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        let before = quad(&ps);
        fill_grad(&mut ps);
        opt.step(&mut ps);
        // first Adam step moves each coordinate by lr against the gradient sign
        let x = &ps.get("x").unwrap().data;
        assert!((x[0] - 3.9).abs() < 1e-6 && (x[1] - 2.9).abs() < 1e-6);
        assert!(quad(&ps) < before);
        for _ in 0..500 {
            fill_grad(&mut ps);
            opt.step(&mut ps);
        }
        assert!(quad(&ps) < 1e-3);
    }
}
