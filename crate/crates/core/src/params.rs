//! Named parameter arrays and their binding into a differentiation session.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Prefix for arrays stored alongside parameters that are never trained.
pub const BUFFER_PREFIX: &str = "buffer.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Digest of the bit patterns of every array whose name passes `filter`.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.map.iter().filter(|(n, _)| filter(n)) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Which parameters receive gradients in a session.
#[derive(Clone, Debug)]
pub enum Trainable {
    None,
    All,
    /// Parameters whose name starts with any of the prefixes.
    Prefixes(Vec<String>),
    /// Everything except names starting with any of the prefixes.
    Except(Vec<String>),
}

impl Trainable {
    pub fn prefixes(p: &[&str]) -> Self {
        Trainable::Prefixes(p.iter().map(|s| s.to_string()).collect())
    }

    pub fn except(p: &[&str]) -> Self {
        Trainable::Except(p.iter().map(|s| s.to_string()).collect())
    }

    pub fn includes(&self, name: &str) -> bool {
        if name.starts_with(BUFFER_PREFIX) {
            return false;
        }
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
            Trainable::Except(ps) => !ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// A graph plus lazily bound parameters. Each parameter is bound at most once,
/// so weights reused in several places accumulate a single gradient.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    trainable: Trainable,
    bound: BTreeMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: Trainable) -> Self {
        Session {
            g: Graph::new(),
            store,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable.includes(name) {
            self.g.leaf(t)
        } else {
            self.g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// Gradients of `loss` for every bound trainable parameter. Parameters that
    /// were bound but received no gradient report zeros.
    pub fn gradients(&self, loss: Var) -> BTreeMap<String, Tensor> {
        let grads = self.g.backward(loss);
        self.bound
            .iter()
            .filter(|(name, _)| self.trainable.includes(name))
            .map(|(name, &v)| {
                let t = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.g.shape(v)));
                (name.clone(), t)
            })
            .collect()
    }
}

/// Seeded parameter initialization.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal weights `[cout, cin, k, k]` at `{prefix}.w` and zero bias at `{prefix}.b`.
    pub fn conv(&mut self, store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let data = (0..cout * cin * k * k)
            .map(|_| normal.sample(&mut self.rng))
            .collect();
        store.insert(format!("{prefix}.w"), Tensor::new(&[cout, cin, k, k], data));
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
    }

    pub fn conv_zero(&mut self, store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize) {
        store.insert(format!("{prefix}.w"), Tensor::zeros(&[cout, cin, k, k]));
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
    }

    pub fn norm(&mut self, store: &mut ParamStore, prefix: &str, c: usize, gamma: f64) {
        store.insert(format!("{prefix}.gamma"), Tensor::full(&[c], gamma));
        store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
    }

    /// A convolution followed by normalization, sharing `prefix`.
    pub fn conv_norm(&mut self, store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.conv(store, prefix, cin, cout, k);
        self.norm(store, prefix, cout, 1.0);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// `conv(x)` using `{prefix}.w` / `{prefix}.b`.
pub fn conv(s: &mut Session, x: Var, prefix: &str, dilation: usize) -> Result<Var> {
    let w = s.param(&format!("{prefix}.w"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    Ok(s.g.conv2d(x, w, Some(b), dilation))
}

/// `relu(norm(conv(x)))`: the conv-norm-activation unit used throughout.
pub fn conv_norm_relu(s: &mut Session, x: Var, prefix: &str, dilation: usize) -> Result<Var> {
    let y = conv(s, x, prefix, dilation)?;
    let gamma = s.param(&format!("{prefix}.gamma"))?;
    let beta = s.param(&format!("{prefix}.beta"))?;
    let n = s.g.instance_norm(y, gamma, beta);
    Ok(s.g.relu(n))
}
