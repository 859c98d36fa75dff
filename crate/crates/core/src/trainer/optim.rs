use crate::gradcore::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction, one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Applies one update from the gradients currently held by `store`;
    /// parameters without a gradient are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.tensor.grad.clone() else { continue };
            for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.params_mut() {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// new best validation score.
#[derive(Debug, Clone)]
pub struct PlateauHalving {
    pub lr: f64,
    pub best: f64,
    patience: usize,
    bad: usize,
}

impl PlateauHalving {
    pub fn new(lr: f64, patience: usize) -> Self {
        Self { lr, best: f64::NEG_INFINITY, patience, bad: 0 }
    }

    /// Records an epoch's validation score; returns true on a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.bad = 0;
            return true;
        }
        self.bad += 1;
        if self.patience > 0 && self.bad >= self.patience {
            self.lr *= 0.5;
            self.bad = 0;
        }
        false
    }
}
