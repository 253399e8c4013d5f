use crate::real::Real;
use crate::splat_render::GaussianCloud;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update of a single scalar at step `t` (1-based).
pub fn adam_update(param: &mut f64, grad: f64, m: &mut f64, v: &mut f64, t: u64, lr: f64, p: AdamParams) {
    *m = p.beta1 * *m + (1.0 - p.beta1) * grad;
    *v = p.beta2 * *v + (1.0 - p.beta2) * grad * grad;
    let m_hat = *m / (1.0 - p.beta1.powi(t as i32));
    let v_hat = *v / (1.0 - p.beta2.powi(t as i32));
    *param -= lr * m_hat / (v_hat.sqrt() + p.eps);
}

/// First and second moments for every stored parameter of a cloud, laid out
/// like [`GaussianCloud`] so that `moments.len() == cloud.len()` always.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: GaussianCloud<T>,
    pub v: GaussianCloud<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self { step: 0, m: GaussianCloud::zeros(n), v: GaussianCloud::zeros(n) }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Applies one update with a learning rate per [`crate::splat_render::ParamGroup`].
    /// A zero gradient with zero moments leaves the parameter untouched.
    pub fn step(&mut self, cloud: &mut GaussianCloud<T>, grads: &GaussianCloud<T>, lrs: &[f64; 5], p: AdamParams) {
        assert_eq!(cloud.len(), self.len(), "moments out of sync with cloud");
        assert_eq!(grads.len(), self.len(), "gradients out of sync with cloud");
        self.step += 1;
        let t = self.step;
        let c1 = 1.0 - p.beta1.powi(t as i32);
        let c2 = 1.0 - p.beta2.powi(t as i32);
        let grads = grads.groups();
        let m = self.m.groups_mut();
        let v = self.v.groups_mut();
        for (g, (_, params)) in cloud.groups_mut().into_iter().enumerate() {
            let lr = lrs[g];
            let (gs, ms, vs) = (grads[g].1, &mut *m[g].1, &mut *v[g].1);
            for k in 0..params.len() {
                let grad = gs[k].as_f64();
                let mk = p.beta1 * ms[k].as_f64() + (1.0 - p.beta1) * grad;
                let vk = p.beta2 * vs[k].as_f64() + (1.0 - p.beta2) * grad * grad;
                ms[k] = T::of(mk);
                vs[k] = T::of(vk);
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + p.eps);
                if update != 0.0 {
                    params[k] = T::of(params[k].as_f64() - update);
                }
            }
        }
    }

    pub fn retain_mask(&mut self, keep: &[bool]) {
        self.m.retain_mask(keep);
        self.v.retain_mask(keep);
    }

    /// Appends zero moments for `n` new splats.
    pub fn push_zeros(&mut self, n: usize) {
        let z = GaussianCloud::zeros(n);
        for i in 0..n {
            self.m.push_from(&z, i);
            self.v.push_from(&z, i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook Adam written against plain vectors.
    fn reference(params: &mut [f64], grads_per_step: &[Vec<f64>], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.99f64, 1e-15f64);
        let mut m = vec![0.0; params.len()];
        let mut v = vec![0.0; params.len()];
        for (step, g) in grads_per_step.iter().enumerate() {
            let t = (step + 1) as f64;
            for i in 0..params.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powf(t));
                let vh = v[i] / (1.0 - b2.powf(t));
                params[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    #[test]
    fn matches_reference_on_random_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 7;
        let mut cloud = GaussianCloud::<f64>::zeros(n);
        for (_, v) in cloud.groups_mut() {
            v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
        let lrs = [5e-5, 1e-3, 1e-2, 1.25e-2, 1e-2];
        let p = AdamParams { beta1: 0.9, beta2: 0.99, eps: 1e-15 };
        let steps: Vec<GaussianCloud<f64>> = (0..50)
            .map(|_| {
                let mut g = GaussianCloud::zeros(n);
                for (_, v) in g.groups_mut() {
                    v.iter_mut().for_each(|x| *x = rng.gen_range(-3.0..3.0));
                }
                g
            })
            .collect();

        let mut expected = cloud.clone();
        for (gi, (_, params)) in expected.groups_mut().into_iter().enumerate() {
            let per_step: Vec<Vec<f64>> = steps.iter().map(|g| g.groups()[gi].1.to_vec()).collect();
            reference(params, &per_step, lrs[gi]);
        }

        let mut state = AdamState::new(n);
        for g in &steps {
            state.step(&mut cloud, g, &lrs, p);
        }
        for (a, b) in cloud.groups().iter().zip(expected.groups().iter()) {
            for (x, y) in a.1.iter().zip(b.1.iter()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }

        let mut scalar = 0.3;
        let (mut m, mut v) = (0.0, 0.0);
        let mut vec_form = [0.3];
        let gs: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64 * 0.7).sin()]).collect();
        for (t, g) in gs.iter().enumerate() {
            adam_update(&mut scalar, g[0], &mut m, &mut v, t as u64 + 1, 1e-2, p);
        }
        reference(&mut vec_form, &gs, 1e-2);
        assert!((scalar - vec_form[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut cloud = GaussianCloud::<f32>::zeros(3);
        cloud.opacity_logits = vec![0.25, -1.0, 2.0];
        let before = cloud.clone();
        let mut state = AdamState::new(3);
        for _ in 0..5 {
            state.step(
                &mut cloud,
                &GaussianCloud::zeros(3),
                &[1.0; 5],
                AdamParams { beta1: 0.9, beta2: 0.99, eps: 1e-15 },
            );
        }
        assert_eq!(cloud, before);
    }

    #[test]
    fn reindexing_tracks_length() {
        let mut state = AdamState::<f64>::new(4);
        state.m.opacity_logits = vec![1.0, 2.0, 3.0, 4.0];
        state.retain_mask(&[true, false, true, false]);
        state.push_zeros(2);
        assert_eq!(state.len(), 4);
        assert_eq!(state.m.opacity_logits, vec![1.0, 3.0, 0.0, 0.0]);
        state.m.validate().unwrap();
        state.v.validate().unwrap();
    }
}
