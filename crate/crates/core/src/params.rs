//! Named parameter storage.
//!
//! Every learnable (and frozen) tensor lives here under a dotted name such
//! as `lm.layer0.attn.wq` or `vis_proj.w0`. Namespace prefixes double as
//! trainable scopes: the optimizer only touches entries matching a scope,
//! which is what makes the stage freeze contract checkable bit-for-bit.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        let prev = self.entries.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Deterministic (sorted) iteration order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count, e.g. for the <=1M-parameter budget check.
    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Names matching any of the scope prefixes.
    pub fn names_in_scopes(&self, scopes: &[String]) -> Vec<String> {
        self.entries
            .keys()
            .filter(|n| scopes.iter().any(|s| n.starts_with(s.as_str())))
            .cloned()
            .collect()
    }

    /// Names of entries bit-identical between two stores; both stores must
    /// hold the same keys.
    pub fn diff_names(&self, other: &ParamStore) -> Vec<String> {
        assert_eq!(self.names(), other.names(), "stores hold different keys");
        self.entries
            .iter()
            .filter(|(k, v)| !v.bit_eq(other.get(k)))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// Weight init recipes keyed off fan-in.
pub fn init_normal(rng: &mut crate::rng::SeededRng, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data.iter_mut() {
        *v = rng.normal_scaled(std);
    }
    t
}

pub fn init_xavier(rng: &mut crate::rng::SeededRng, rows: usize, cols: usize) -> Tensor {
    let std = 1.0 / crate::mathfn::sqrt(rows as f64);
    init_normal(rng, rows, cols, std)
}

pub fn init_ones(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data.iter_mut() {
        *v = 1.0;
    }
    t
}
