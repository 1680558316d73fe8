use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors with gradient accumulators, kept in name order so
/// that iteration and serialization are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.to_string(), Param { value, grad });
    }

    /// Inserts a tensor drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn init_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * grads[name]` into each accumulator.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Tensor>, scale: f64) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Lookup(format!("parameter {name}")))?;
            if p.grad.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "accumulate",
                    lhs: p.grad.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += scale * b);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_is_bounded_and_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.init_uniform("w", &[16, 4], 16, &mut ChaCha8Rng::seed_from_u64(3));
        b.init_uniform("w", &[16, 4], 16, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.value("w").unwrap().data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn accumulate_scales_and_checks_shape() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::full(&[2], 2.0));
        s.accumulate(&g, 0.5).unwrap();
        s.accumulate(&g, 0.5).unwrap();
        assert_eq!(s.get("w").unwrap().grad.data(), &[2.0, 2.0]);
        s.zero_grad();
        assert_eq!(s.get("w").unwrap().grad.data(), &[0.0, 0.0]);

        g.insert("w".to_string(), Tensor::zeros(&[3]));
        assert!(s.accumulate(&g, 1.0).is_err());
    }
}
