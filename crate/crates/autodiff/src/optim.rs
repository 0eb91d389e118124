use crate::params::ParamStore;

/// First-order update rule applied to every trainable parameter.
pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore);
}

/// Gradient descent with classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        if self.velocity.len() != ids.len() {
            self.velocity = ids.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
        }
        for (slot, id) in ids.into_iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let g = store.grad(id).to_vec();
            let v = &mut self.velocity[slot];
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi = self.momentum * *vi + gi;
            }
            let lr = self.lr;
            for (w, vi) in store.value_mut(id).data_mut().iter_mut().zip(v.iter()) {
                *w -= lr * vi;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        if self.m.len() != ids.len() {
            self.m = ids.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (slot, id) in ids.into_iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let g = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let w = store.value_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
