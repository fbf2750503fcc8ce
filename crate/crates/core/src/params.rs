//! Named parameter storage shared by adapters, the optimizer and checkpoints.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Tensors keyed by slash-separated names, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Drops every tensor whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of stored scalars.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Copies in every tensor of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Canonical byte form: per tensor, in name order,
    /// `name \0 dims(comma) \0 values(comma, 17 sig. digits) \n`.
    pub fn canonical_bytes(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in self.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
            out.extend_from_slice(dims.join(",").as_bytes());
            out.push(0);
            out.extend_from_slice(t.to_decimal_strings().join(",").as_bytes());
            out.push(b'\n');
        }
        out
    }

    /// Lowercase hex SHA-256 of [`canonical_bytes`](Self::canonical_bytes).
    pub fn digest(&self, prefix: &str) -> String {
        sha256_hex(&self.canonical_bytes(prefix))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in hash.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Graph node ids for the tensors of a [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    /// Inserts every tensor into `g`, as a trainable leaf where `trainable`
    /// says so and as a constant otherwise.
    pub fn bind(g: &mut Graph, params: &ParamSet, trainable: impl Fn(&str) -> bool) -> Self {
        let ids = params
            .iter()
            .map(|(name, t)| {
                let id = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.to_string(), id)
            })
            .collect();
        Binding { ids }
    }

    /// A binding over nodes that already exist, e.g. leaves made by a
    /// gradient checker.
    pub fn from_nodes<S: Into<String>>(nodes: impl IntoIterator<Item = (S, NodeId)>) -> Self {
        Binding {
            ids: nodes.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
