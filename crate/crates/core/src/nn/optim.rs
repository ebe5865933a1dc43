use std::collections::HashMap;
use std::f64::consts::PI;

use super::{LayerGrad, ParamGrads};
use crate::netgraph::{LayerWeights, NetworkGraph};

/// Cosine decay from `base` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let t = (step as f64 / total_steps as f64).min(1.0);
    0.5 * base * (1.0 + (PI * t).cos())
}

/// RMSProp without momentum: `v = rho v + (1 - rho) g^2`, `p -= lr g / (sqrt(v) + eps)`.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub rho: f64,
    pub eps: f64,
    state: HashMap<String, Vec<f64>>,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self::new(0.99, 1e-8)
    }
}

impl RmsProp {
    pub fn new(rho: f64, eps: f64) -> Self {
        Self {
            rho,
            eps,
            state: HashMap::new(),
        }
    }

    fn slot(&mut self, key: &str, len: usize) -> &mut Vec<f64> {
        let v = self
            .state
            .entry(key.to_string())
            .or_insert_with(|| vec![0.0; len]);
        assert_eq!(v.len(), len, "optimizer state for `{key}` changed size");
        v
    }

    pub fn update_f32(&mut self, key: &str, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), grads.len());
        let (rho, eps) = (self.rho, self.eps);
        let v = self.slot(key, params.len());
        for ((p, &g), s) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
            let g = g as f64;
            *s = rho * *s + (1.0 - rho) * g * g;
            *p -= (lr * g / (s.sqrt() + eps)) as f32;
        }
    }

    pub fn update_f64(&mut self, key: &str, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        let (rho, eps) = (self.rho, self.eps);
        let v = self.slot(key, params.len());
        for ((p, &g), s) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
            *s = rho * *s + (1.0 - rho) * g * g;
            *p -= lr * g / (s.sqrt() + eps);
        }
    }

    /// Applies `grads` to every learnable tensor of `net`.
    pub fn step(&mut self, net: &mut NetworkGraph, grads: &ParamGrads, lr: f64) {
        for (id, g) in grads {
            let Some(w) = net.weights_mut().get_mut(id) else {
                continue;
            };
            match (w, g) {
                (LayerWeights::Conv(c), LayerGrad::Conv { weight, bias }) => {
                    self.update_f32(
                        &format!("{id}/weight"),
                        c.weight.as_slice_mut().expect("standard layout"),
                        weight.as_slice().expect("standard layout"),
                        lr,
                    );
                    if let (Some(b), Some(gb)) = (c.bias.as_mut(), bias.as_ref()) {
                        self.update_f32(
                            &format!("{id}/bias"),
                            b.as_slice_mut().unwrap(),
                            gb.as_slice().unwrap(),
                            lr,
                        );
                    }
                }
                (LayerWeights::Bn(p), LayerGrad::Bn { gamma, beta }) => {
                    self.update_f32(
                        &format!("{id}/gamma"),
                        p.gamma.as_slice_mut().unwrap(),
                        gamma.as_slice().unwrap(),
                        lr,
                    );
                    self.update_f32(
                        &format!("{id}/beta"),
                        p.beta.as_slice_mut().unwrap(),
                        beta.as_slice().unwrap(),
                        lr,
                    );
                }
                _ => panic!("gradient kind does not match parameters of `{id}`"),
            }
        }
    }
}
