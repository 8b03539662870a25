//! SGD with momentum and L2 weight decay.

use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

/// Heavy-ball SGD:
/// `v <- momentum * v + (grad + weight_decay * value)`, `value <- value - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn with_defaults(lr: f64) -> Self {
        Self::new(lr, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY)
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            let v = vel.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let wd = self.weight_decay;
            let mu = self.momentum;
            for ((v, g), w) in v
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(p.value.data())
            {
                *v = mu * *v + (g + wd * w);
            }
            for (w, v) in p.value.data_mut().iter_mut().zip(v.data()) {
                *w -= self.lr * v;
            }
        }
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
