use indexmap::IndexMap;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::DiffError;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named learnable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

/// Tape handles for every parameter of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), DiffError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(DiffError::Contract(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.entries[name].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Record every parameter as a gradient-requiring leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), tape.param(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Record every parameter as a constant (no-grad evaluation).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), tape.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Add the tape's gradients for the bound leaves into the stored gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (name, param) in self.entries.iter_mut() {
            if let Some(g) = bound.try_get(name).and_then(|v| tape.grad(v)) {
                param.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// All parameter values concatenated in order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    /// Overwrite values from a flat buffer laid out like [`ParamSet::flat_values`].
    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<(), DiffError> {
        if flat.len() != self.count() {
            return Err(DiffError::Shape {
                op: "set_flat_values",
                left: vec![self.count()],
                right: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for p in self.entries.values_mut() {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Central-difference gradient of `f` with respect to every parameter entry.
pub fn fd_gradient(
    mut f: impl FnMut(&ParamSet) -> f64,
    params: &ParamSet,
    step: f64,
) -> Vec<Tensor> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in &names {
        let n = work.value(name).numel();
        let mut grad = Tensor::zeros(work.value(name).shape());
        for i in 0..n {
            let orig = work.value(name).data()[i];
            work.get_mut(name).expect("exists").value.data_mut()[i] = orig + step;
            let plus = f(&work);
            work.get_mut(name).expect("exists").value.data_mut()[i] = orig - step;
            let minus = f(&work);
            work.get_mut(name).expect("exists").value.data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        p.insert("b", Tensor::matrix(2, 2, vec![0.5, -1.0, 3.0, 0.25]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let mut p = sample_params();
        assert!(p.insert("a", Tensor::scalar(0.0)).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(p.count(), 6);
    }

    #[test]
    fn fd_of_sum_is_all_ones() {
        let p = sample_params();
        let g = fd_gradient(|q| q.flat_values().iter().sum(), &p, 1e-5);
        for t in g {
            for v in t.data() {
                assert!((v - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let p = sample_params();
        let g = fd_gradient(|_| 0.0, &p, 1e-5);
        assert!(g.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn flat_round_trip() {
        let mut p = sample_params();
        let mut flat = p.flat_values();
        flat[3] = 9.0;
        p.set_flat_values(&flat).unwrap();
        assert_eq!(p.value("b").data()[1], 9.0);
        assert!(p.set_flat_values(&flat[..2]).is_err());
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut p = sample_params();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let s = tape.sum(bound.get("a")).unwrap();
            tape.backward(s).unwrap();
            p.accumulate_grads(&tape, &bound);
        }
        assert_eq!(p.get("a").unwrap().grad.data(), &[2.0, 2.0]);
        assert_eq!(p.get("b").unwrap().grad.data(), &[0.0; 4]);
        p.zero_grads();
        assert_eq!(p.get("a").unwrap().grad.data(), &[0.0, 0.0]);
    }
}
