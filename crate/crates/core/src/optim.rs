//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Gradients, Scalar};

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
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    /// First and second moments per trainable parameter, by visit order.
    moments: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update to every trainable parameter of `module`. A
    /// parameter without an entry in `grads` is treated as having a zero
    /// gradient.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Gradients<T>) -> Result<()> {
        let cfg = self.config;
        if !(cfg.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        // Validate before touching anything so a bad step leaves no trace.
        let mut bad = None;
        module.visit_params(&mut |p| {
            if let Some(g) = grads.get(p.tensor()) {
                if bad.is_none() && g.data().iter().any(|v| !v.is_finite()) {
                    bad = Some(p.name.clone());
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (lr, eps) = (cfg.lr, cfg.eps);
        let mut idx = 0;
        let moments = &mut self.moments;
        let mut result = Ok(());
        module.visit_params_mut(&mut |p| {
            if !p.trainable() || result.is_err() {
                return;
            }
            let n = p.tensor().numel();
            if moments.len() <= idx {
                moments.push((p.name.clone(), vec![T::zero(); n], vec![T::zero(); n]));
            }
            let (name, m, v) = &mut moments[idx];
            idx += 1;
            if *name != p.name || m.len() != n {
                result = Err(Error::invalid(format!("optimizer state for `{name}` does not match `{}`", p.name)));
                return;
            }
            let Some(g) = grads.get(p.tensor()) else {
                // zero gradient: moments decay, parameters move only through m
                for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                    *mi *= b1;
                    *vi *= b2;
                }
                if m.iter().all(|a| a.is_zero()) {
                    return;
                }
                let data = update(p.tensor().data(), m, v, lr, bc1, bc2, eps);
                result = p.set_data(data);
                return;
            };
            for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let data = update(p.tensor().data(), m, v, lr, bc1, bc2, eps);
            result = p.set_data(data);
        });
        result
    }

    /// Moment buffers as (name, m, v), in parameter order.
    pub fn moments(&self) -> &[(String, Vec<T>, Vec<T>)] {
        &self.moments
    }

    pub fn restore(&mut self, step: u64, moments: Vec<(String, Vec<T>, Vec<T>)>) {
        self.step = step;
        self.moments = moments;
    }
}

fn update<T: Scalar>(theta: &[T], m: &[T], v: &[T], lr: f64, bc1: f64, bc2: f64, eps: f64) -> Vec<T> {
    theta
        .iter()
        .zip(m.iter().zip(v))
        .map(|(&th, (&mi, &vi))| {
            let mh = mi.f64() / bc1;
            let vh = vi.f64() / bc2;
            T::of(th.f64() - lr * mh / (vh.sqrt() + eps))
        })
        .collect()
}
