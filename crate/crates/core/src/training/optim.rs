use crate::model::{Grads, ParamStore};

/// Adam with the usual defaults and optional L2 decay.
///
/// Each tensor keeps its own step count, so tensors unlocked late get the
/// full bias correction on their first update.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            steps: vec![0; store.len()],
        }
    }

    /// Updates every tensor for which `trainable(name)` holds; the others,
    /// and their moments, are left untouched. `decays(name)` selects the
    /// tensors subject to weight decay.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Grads,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
        decays: impl Fn(&str) -> bool,
    ) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            if !trainable(&param.name) {
                continue;
            }
            let wd = if decays(&param.name) { self.weight_decay } else { 0.0 };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..param.data.len() {
                let w = param.data[j] as f64;
                let gj = g[j] as f64 + wd * w;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                param.data[j] = (w - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut store = ParamStore::new();
        let a = store.add("a", &[2], vec![1.0, -1.0]);
        let b = store.add("b", &[1], vec![0.5]);
        let mut grads = store.zero_grads();
        grads.get_mut(a).copy_from_slice(&[0.3, -2.0]);
        grads.get_mut(b)[0] = 1.0;
        let mut opt = Adam::new(&store, 0.0);
        opt.step(&mut store, &grads, 0.1, |n| n == "a", |_| true);
        // Bias-corrected first step: sign(g) · lr.
        assert!((store.data(a)[0] - 0.9).abs() < 1e-6);
        assert!((store.data(a)[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.data(b), &[0.5]);
        assert_eq!(opt.steps, vec![1, 0]);
    }

    #[test]
    fn decay_pulls_towards_zero() {
        let mut store = ParamStore::new();
        let a = store.add("a", &[1], vec![2.0]);
        let grads = store.zero_grads();
        let mut opt = Adam::new(&store, 0.1);
        opt.step(&mut store, &grads, 0.01, |_| true, |_| true);
        assert!(store.data(a)[0] < 2.0);
        let mut store2 = ParamStore::new();
        let a2 = store2.add("a", &[1], vec![2.0]);
        let mut opt2 = Adam::new(&store2, 0.1);
        opt2.step(&mut store2, &grads, 0.01, |_| true, |_| false);
        assert_eq!(store2.data(a2)[0], 2.0);
    }
}
