use indexmap::IndexMap;

use crate::params::ParamStore;

/// Bias-corrected Adam over the learnable entries of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count.
    pub t: u64,
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.learnable().map(|p| (p.name.clone(), vec![0.0f32; p.len()])).collect::<IndexMap<_, _>>();
        Adam { lr, beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    /// One update. Parameters without an entry in `grads` are treated as
    /// having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Vec<f32>>) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for p in params.iter_mut().filter(|p| p.learnable) {
            let g = grads.get(&p.name);
            let m = self.m.get_mut(&p.name).expect("moment per learnable param");
            let v = self.v.get_mut(&p.name).expect("moment per learnable param");
            for k in 0..p.data.len() {
                let gk = g.map_or(0.0, |g| g[k] as f64);
                let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = self.lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                p.data[k] = (p.data[k] as f64 - update) as f32;
            }
        }
    }
}
