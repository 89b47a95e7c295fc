//! Named parameter storage and graph binding.
//!
//! All learned state lives in a `ParamStore` keyed by dotted names
//! (`encoder.spatial.0.attn.wq`, `text.tok_emb`, ...). Training binds the
//! store into a fresh graph each step and pulls gradients back out by name.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Result, VfmError};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, TensorData};

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<(String, TensorData<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: TensorData<F>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = value;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, value));
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorData<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorData<F>> {
        self.index.get(name).copied().map(move |i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|(n, _)| !n.starts_with(prefix));
        self.index.clear();
        for (i, (n, _)) in self.entries.iter().enumerate() {
            self.index.insert(n.clone(), i);
        }
    }

    /// Insertion-ordered iteration (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copy entries whose name starts with `prefix` from `other`, by name.
    /// Returns how many were copied; shape mismatches error.
    pub fn load_subset(&mut self, other: &ParamStore<F>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, value) in other.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(dst) = self.get_mut(name) {
                if dst.shape() != value.shape() {
                    return Err(VfmError::Checkpoint(format!(
                        "shape mismatch loading `{name}`: {:?} vs {:?}",
                        dst.shape(),
                        value.shape()
                    )));
                }
                *dst = value.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn map_to<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.map_to::<G>());
        }
        out
    }
}

impl ParamStore<f32> {
    /// SHA-256 over sorted (name, shape, little-endian data); the frozen-
    /// backbone contract checks compare these.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut names: Vec<&str> = self.names().collect();
        names.sort_unstable();
        let mut h = Sha256::new();
        for name in names {
            let t = self.get(name).expect("indexed");
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Hash restricted to names matching a predicate (e.g. backbone-only).
    pub fn content_hash_filtered(&self, keep: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut names: Vec<&str> = self.names().filter(|n| keep(n)).collect();
        names.sort_unstable();
        let mut h = Sha256::new();
        for name in names {
            let t = self.get(name).expect("indexed");
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Name -> graph leaf mapping for one training step.
#[derive(Debug, Default)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| VfmError::invalid(format!("parameter `{name}` not bound")))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

/// Bind every parameter as a graph leaf; `trainable` controls requires_grad.
pub fn bind<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    trainable: impl Fn(&str) -> bool,
) -> BoundParams {
    let mut bound = BoundParams::default();
    for (name, value) in store.iter() {
        let v = g.leaf(value.clone(), trainable(name));
        bound.insert(name, v);
    }
    bound
}

pub type GradMap<F> = HashMap<String, Vec<F>>;

/// Pull gradients back out of the graph after `backward`, keyed by name.
pub fn collect_grads<F: Scalar>(g: &Graph<F>, bound: &BoundParams) -> GradMap<F> {
    let mut out = GradMap::new();
    for (name, var) in bound.iter() {
        if let Some(grad) = g.grad(var) {
            out.insert(name.to_string(), grad.to_vec());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_get_roundtrip() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.w", TensorData::filled(vec![2, 2], 1.0));
        assert!(s.contains("a.w"));
        assert_eq!(s.get("a.w").unwrap().numel(), 4);
        assert_eq!(s.scalar_count(), 4);
    }

    #[test]
    fn hash_changes_with_content() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", TensorData::filled(vec![2], 1.0));
        let h1 = s.content_hash();
        s.get_mut("w").unwrap().data_mut()[0] = 2.0;
        let h2 = s.content_hash();
        assert_ne!(h1, h2);
    }

    #[test]
    fn subset_load_by_prefix() {
        let mut teacher = ParamStore::<f32>::new();
        teacher.insert("encoder.w", TensorData::filled(vec![2], 3.0));
        teacher.insert("text.w", TensorData::filled(vec![2], 5.0));
        let mut student = ParamStore::<f32>::new();
        student.insert("encoder.w", TensorData::filled(vec![2], 0.0));
        student.insert("decoder.w", TensorData::filled(vec![2], 0.0));
        let n = student.load_subset(&teacher, "encoder.").unwrap();
        assert_eq!(n, 1);
        assert_eq!(student.get("encoder.w").unwrap().data(), &[3.0, 3.0]);
        assert_eq!(student.get("decoder.w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn grads_only_for_trainable() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", TensorData::filled(vec![2], 1.0));
        s.insert("frozen", TensorData::filled(vec![2], 1.0));
        let mut g = Graph::<f64>::new();
        let bound = bind(&mut g, &s, |n| n == "w");
        let w = bound.var("w").unwrap();
        let f = bound.var("frozen").unwrap();
        let sum1 = g.add(w, f).unwrap();
        let loss = g.sum_all(sum1);
        g.backward(loss).unwrap();
        let grads = collect_grads(&g, &bound);
        assert!(grads.contains_key("w"));
        assert!(!grads.contains_key("frozen"));
    }
}
