//! Adam with global-norm gradient clipping.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Moment {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled so their global L2 norm is at most this.
    pub clip_norm: Option<f64>,
    pub step: u64,
    /// One entry per parameter, in the model's visit order.
    pub moments: Vec<Moment>,
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm<P: Parameters + ?Sized>(model: &mut P) -> f64 {
    let mut sq = 0.0;
    model.visit_params("", &mut |_, p| sq += p.grad.norm_sq());
    libm::sqrt(sq)
}

impl Adam {
    pub fn new<P: Parameters + ?Sized>(model: &mut P, lr: f64) -> Self {
        let mut moments = Vec::new();
        model.visit_params("", &mut |name, p| {
            moments.push(Moment {
                name: String::from(name),
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            })
        });
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(DEFAULT_CLIP_NORM), step: 0, moments }
    }

    /// Applies one update from the accumulated gradients and returns the
    /// gradient norm before clipping. Gradients are left in place.
    pub fn update<P: Parameters + ?Sized>(&mut self, model: &mut P) -> Result<f64> {
        let norm = grad_norm(model);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let mut i = 0;
        let mut mismatch = None;
        let moments = &mut self.moments;
        model.visit_params("", &mut |name, p| {
            let Some(mo) = moments.get_mut(i).filter(|mo| mo.name == name && mo.m.shape() == p.value.shape()) else {
                mismatch.get_or_insert_with(|| String::from(name));
                return;
            };
            i += 1;
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (k, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = g * scale;
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                *w -= lr * (m[k] / bc1) / (libm::sqrt(v[k] / bc2) + eps);
            }
        });
        if let Some(name) = mismatch {
            return Err(Error::Config(format!("optimizer state does not match parameter {name}")));
        }
        Ok(norm)
    }
}
