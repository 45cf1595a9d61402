//! Stock Adam with bias correction. State is kept per parameter slot in
//! registration order, so updates are deterministic.

use super::graph::Arr;
use super::layers::{ParamId, ParamStore};
use ndarray::ArrayD;

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        let m = (0..store.len())
            .map(|i| ArrayD::zeros(store.value(ParamId(i)).raw_dim()))
            .collect();
        let v = (0..store.len())
            .map(|i| ArrayD::zeros(store.value(ParamId(i)).raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, Arr)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, grad) in grads {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|mi, &gi| {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            });
            let p = store.value_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize f(p) = ||p - target||^2
        let mut ps = ParamStore::new();
        let p = ps.register("p", ArrayD::zeros(IxDyn(&[4])));
        let target = ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..800 {
            let grad = (ps.value(p) - &target) * 2.0;
            opt.apply(&mut ps, &[(p, grad)]);
        }
        let err: f32 = (ps.value(p) - &target).mapv(|x| x.abs()).sum();
        assert!(err < 1e-2, "residual {err}");
    }
}
