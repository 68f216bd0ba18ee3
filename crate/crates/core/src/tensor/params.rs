//! Named parameter storage plus the per-step bridge onto a tape.
//!
//! Parameters live in a `ParamStore` across steps; a `Binding` leases
//! them onto a fresh tape as leaves, caches the mapping, and hands the
//! gradients back out after `backward`.

use std::collections::BTreeMap;

use super::array::Array;
use super::real::Real;
use super::rng::Rng;
use super::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub value: Array<T>,
    /// Frozen tensors are bound without gradient and skipped by the
    /// optimizer; their bytes never change after init.
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Array<T>) {
        assert!(
            !self.entries.contains_key(name),
            "parameter name collision: {name}"
        );
        self.entries.insert(name.to_string(), Param { value, frozen: false });
    }

    pub fn insert_frozen(&mut self, name: &str, value: Array<T>) {
        assert!(
            !self.entries.contains_key(name),
            "parameter name collision: {name}"
        );
        self.entries.insert(name.to_string(), Param { value, frozen: true });
    }

    /// Gaussian init with the given std, stream derived from the seed
    /// and the tensor name so registration order is irrelevant.
    pub fn init_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, seed: u64) {
        let mut rng = Rng::derive(seed, name);
        let n: usize = shape.iter().product();
        self.insert(name, Array::from_vec(shape, rng.normal_vec(n, std)));
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Array::zeros(shape));
    }

    /// He-style init for a conv/linear weight of the given fan-in.
    pub fn init_he(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, seed: u64) {
        self.init_normal(name, shape, (2.0 / fan_in as f64).sqrt(), seed);
    }

    pub fn get(&self, name: &str) -> &Array<T> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter: {name}")).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array<T> {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter: {name}")).value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).map(|p| p.frozen).unwrap_or(false)
    }

    pub fn freeze(&mut self, name: &str) {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter: {name}")).frozen =
            true;
    }

    /// Freeze every parameter whose name starts with the prefix.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, p)| !p.frozen).map(|(k, _)| k.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }
}

/// One training step's view: a tape plus lazily bound parameters.
pub struct Binding<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, Var>,
    inference: bool,
}

impl<'p, T: Real> Binding<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Binding { tape: Tape::new(), params, bound: BTreeMap::new(), inference: false }
    }

    /// Everything binds without gradient tracking; backward is skipped
    /// entirely by callers.
    pub fn new_inference(params: &'p ParamStore<T>) -> Self {
        Binding { tape: Tape::new(), params, bound: BTreeMap::new(), inference: true }
    }

    /// Bind (or reuse) the named parameter as a tape leaf. Frozen
    /// parameters come in without gradient tracking.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let p = self
            .params
            .iter()
            .find(|(k, _)| *k == name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .1;
        let var = if p.frozen || self.inference {
            self.tape.constant(p.value.clone())
        } else {
            self.tape.leaf(p.value.clone())
        };
        self.bound.insert(name.to_string(), var);
        var
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.params
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    /// Parameters untouched by the loss report zeros.
    pub fn take_grads(&mut self) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.bound.iter() {
            if !self.params.is_frozen(name) {
                out.insert(name.clone(), self.tape.grad(*var));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a: ParamStore<f64> = ParamStore::new();
        a.init_normal("x", vec![4], 1.0, 7);
        a.init_normal("y", vec![4], 1.0, 7);
        let mut b: ParamStore<f64> = ParamStore::new();
        b.init_normal("y", vec![4], 1.0, 7);
        b.init_normal("x", vec![4], 1.0, 7);
        assert_eq!(a.get("x"), b.get("x"));
        assert_eq!(a.get("y"), b.get("y"));
    }

    #[test]
    #[should_panic(expected = "name collision")]
    fn duplicate_names_rejected() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.init_zeros("w", vec![2]);
        s.init_zeros("w", vec![2]);
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("a", Array::from_vec(vec![2], vec![1.0, 2.0]));
        s.insert_frozen("b", Array::from_vec(vec![2], vec![3.0, 4.0]));
        let mut bind = Binding::new(&s);
        let a = bind.param("a");
        let b = bind.param("b");
        let ab = bind.tape.mul(a, b);
        let loss = bind.tape.sum(ab);
        bind.tape.backward(loss);
        let grads = bind.take_grads();
        assert!(grads.contains_key("a"));
        assert!(!grads.contains_key("b"));
        assert_eq!(grads["a"], vec![3.0, 4.0]);
    }
}
