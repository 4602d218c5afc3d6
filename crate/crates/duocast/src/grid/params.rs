use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to one tensor in a [`ParamSet`]. Stable for the set's lifetime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// One learnable tensor plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamTensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of named parameter tensors.
///
/// Insertion order is the flat index order used by the gradient checker and
/// the checkpoint container, so it must be deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    tensors: Vec<ParamTensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<T>) -> ParamId {
        let name = name.into();
        let len: usize = dims.iter().product();
        assert_eq!(values.len(), len, "parameter {name} data/dims mismatch");
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.tensors.push(ParamTensor {
            name,
            dims,
            values,
            grad: vec![T::zero(); len],
        });
        ParamId(id)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, dims: Vec<usize>) -> ParamId {
        let len: usize = dims.iter().product();
        self.add(name, dims, vec![T::zero(); len])
    }

    /// Gaussian init with std `1/sqrt(fan_in)`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        dims: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let len: usize = dims.iter().product();
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let values = (0..len).map(|_| T::of(dist.sample(rng))).collect();
        self.add(name, dims, values)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<T>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Maps a global flat index to (tensor, offset within tensor).
    pub fn locate(&self, flat: usize) -> Result<(ParamId, usize)> {
        let mut rest = flat;
        for (i, t) in self.tensors.iter().enumerate() {
            if rest < t.len() {
                return Ok((ParamId(i), rest));
            }
            rest -= t.len();
        }
        Err(Error::contract(format!(
            "flat parameter index {flat} out of range ({} scalars)",
            self.scalar_count()
        )))
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            for g in &mut t.grad {
                *g = T::zero();
            }
        }
    }

    /// Sum of |grad| over every tensor, in f64.
    pub fn grad_abs_sum(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.grad.iter())
            .map(|g| g.f64().abs())
            .sum()
    }

    pub fn accumulate(&mut self, grads: &GradMap<T>) {
        for (id, g) in grads.iter() {
            let t = &mut self.tensors[id.0];
            assert_eq!(t.grad.len(), g.len(), "gradient length mismatch");
            for (acc, &v) in t.grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for t in &self.tensors {
            out.add(
                t.name.clone(),
                t.dims.clone(),
                t.values.iter().map(|v| U::of(v.f64())).collect(),
            );
        }
        out
    }
}

/// Per-parameter gradient vectors produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct GradMap<T> {
    grads: HashMap<usize, Vec<T>>,
}

impl<T: Real> GradMap<T> {
    pub fn new() -> Self {
        GradMap {
            grads: HashMap::new(),
        }
    }

    pub fn add(&mut self, id: ParamId, adjoint: &[T]) {
        let slot = self
            .grads
            .entry(id.0)
            .or_insert_with(|| vec![T::zero(); adjoint.len()]);
        for (acc, &v) in slot.iter_mut().zip(adjoint) {
            *acc += v;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(&id.0).map(|v| v.as_slice())
    }

    /// Deterministic iteration in tensor-id order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Vec<T>)> {
        let mut keys: Vec<usize> = self.grads.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter().map(move |k| (ParamId(k), &self.grads[&k]))
    }

    pub fn scale(&mut self, s: T) {
        for v in self.grads.values_mut() {
            for g in v {
                *g *= s;
            }
        }
    }

    /// Elementwise sum of two gradient maps.
    pub fn merge(&mut self, other: &GradMap<T>) {
        for (id, g) in other.iter() {
            self.add(id, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_index_locates_tensor_and_offset() {
        let mut ps = ParamSet::<f64>::new();
        let a = ps.add("a", vec![2, 2], vec![0.0; 4]);
        let b = ps.add("b", vec![3], vec![0.0; 3]);
        assert_eq!(ps.locate(0).unwrap(), (a, 0));
        assert_eq!(ps.locate(3).unwrap(), (a, 3));
        assert_eq!(ps.locate(4).unwrap(), (b, 0));
        assert_eq!(ps.locate(6).unwrap(), (b, 2));
        assert!(ps.locate(7).is_err());
    }

    #[test]
    fn zeroed_grads_sum_to_exactly_zero() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", vec![2], vec![1.0, 2.0]);
        let mut gm = GradMap::new();
        gm.add(id, &[0.5, -0.25]);
        ps.accumulate(&gm);
        assert!(ps.grad_abs_sum() > 0.0);
        ps.zero_grads();
        assert_eq!(ps.grad_abs_sum(), 0.0);
    }
}
