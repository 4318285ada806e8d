use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are shaped like their parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.v[id.0]
    }

    /// Applies one update. Parameters without a gradient entry are treated
    /// as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) -> Result<()> {
        for (id, g) in grads {
            if g.data().iter().any(|x| x.is_nan()) {
                return Err(Error::NanGradient(params.name(*id).to_string()));
            }
            if g.shape() != params.get(*id).shape() {
                return Err(Error::dim(
                    "adam",
                    format!("gradient for `{}` has shape {:?}", params.name(*id), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(&id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p.data_mut()[i] -= update;
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    fn grad(id: ParamId, g: f64) -> BTreeMap<ParamId, Tensor> {
        BTreeMap::from([(id, Tensor::scalar(g))])
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let (mut s, id) = single(0.0);
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.01,
                ..Default::default()
            },
            &s,
        );
        let mut prev = 0.0;
        for step in 0..200 {
            opt.step(&mut s, &grad(id, 3.0)).unwrap();
            let now = s.get(id).item();
            if step > 10 {
                assert!(((prev - now) - 0.01).abs() < 1e-6);
            }
            prev = now;
        }
    }

    /// Plain scalar re-implementation of the update rule.
    fn scalar_adam(p0: f64, lr: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps as i32 {
            let g = grad(p);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn quadratic_bowl_matches_scalar_simulation() {
        let (mut s, id) = single(1.0);
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            &s,
        );
        let oracle = scalar_adam(1.0, 0.1, 20, |p| 2.0 * p);
        let mut traj = Vec::new();
        for _ in 0..20 {
            let p = s.get(id).item();
            opt.step(&mut s, &grad(id, 2.0 * p)).unwrap();
            traj.push(s.get(id).item());
        }
        for (a, b) in traj.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // momentum carries p across the minimum after step 11
        let mut prev = 1.0f64;
        for p in &traj[..11] {
            assert!(p.abs() < prev.abs());
            prev = *p;
        }
        assert!(traj[11].abs() > traj[10].abs());
        assert!(traj.iter().all(|p| p.abs() < 1.0));
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let (mut s, id) = single(0.7);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s, &grad(id, 0.0)).unwrap();
        assert_eq!(s.get(id).item(), 0.7);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = single(0.7);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let err = opt.step(&mut s, &grad(id, f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::NanGradient(n) if n == "p"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let (_, id) = single(0.0);
        let mut g = grad(id, -10.0);
        assert_eq!(clip_global_norm(&mut g, 5.0), 10.0);
        assert_eq!(g[&id].item(), -5.0);
    }
}
