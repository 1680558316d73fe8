use std::collections::BTreeMap;

use crate::tensor::{ParamStore, Tensor};

/// Adam with bias correction, reading gradients from the store's
/// accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in store.iter_mut() {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            let gd = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = gd[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(&[1.0, -1.0, 0.5]));
        store.get_mut("w").unwrap().grad = Tensor::row(&[0.3, -2.0, 0.0]);
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut store);
        let w = store.value("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(&[1.0]));
        store.get_mut("w").unwrap().grad = Tensor::row(&[5.0]);
        let before = store.clone();
        Adam::new(0.0, 0.9, 0.999, 1e-8).step(&mut store);
        assert_eq!(store.value("w").unwrap(), before.value("w").unwrap());
    }
}
