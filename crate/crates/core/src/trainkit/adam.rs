use crate::diffcore::{ParamId, ParamStore};

/// Adam with bias correction. Moments exist only for tensors that have been stepped.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update to every trainable tensor holding a gradient, then clears gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(ParamId) -> f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let rate = lr(id);
            let t = store.get_mut(id);
            if !t.is_trainable() {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = self.moments[k].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in t.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= rate * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
            t.zero_grad();
        }
    }
}
