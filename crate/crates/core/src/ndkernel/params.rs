use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{KernelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
///
/// Values sit behind `Arc` so binding onto a tape is a pointer copy and
/// concurrent tapes can share one store read-only.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: BTreeMap<String, ParamId>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a == b)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(KernelError::Invalid { op: "param", detail: format!("bad parameter name {name:?}") });
        }
        if self.index.contains_key(&name) {
            return Err(KernelError::Invalid { op: "param", detail: format!("duplicate parameter {name}") });
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(KernelError::Shape {
                op: "param set",
                left: self.values[id.0].shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, self.shared(id), true)
    }

    /// Binds every parameter; the returned vector is indexed by `ParamId`.
    pub fn bind_all(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.ids().map(|id| tape.param(id, self.shared(id), trainable)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|t| t.is_finite())
    }
}

/// Gradient accumulator indexed by `ParamId`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    data: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { data: vec![None; store.len()] }
    }

    pub fn add_tape(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            self.add(id, g);
        }
    }

    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.data[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (k, g) in other.data.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(k), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.data.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.data[id.0].as_deref()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape product matches value count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(vec![1, 1])).unwrap();
        assert!(s.add("w", Tensor::zeros(vec![1, 1])).is_err());
        assert!(s.add("a b", Tensor::zeros(vec![1, 1])).is_err());
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = init_uniform(&mut ChaCha8Rng::seed_from_u64(3), vec![4, 16], 16);
        let b = init_uniform(&mut ChaCha8Rng::seed_from_u64(3), vec![4, 16], 16);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.25));
    }
}
