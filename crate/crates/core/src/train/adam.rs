use crate::tensor::ParamStore;

/// Adam with bias correction over every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .ids()
            .filter_map(|id| store.get(id).grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies `grad · scale` (after rescaling to at most `clip` in global
    /// norm when `clip > 0`), then clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore, scale: f64, clip: f64) {
        let norm = Self::grad_norm(store) * scale.abs();
        let scale = if clip > 0.0 && norm > clip {
            scale * clip / norm
        } else {
            scale
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = store.get(id).grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                w[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        store.zero_grad();
    }
}
