//! Named parameter stores and the session that binds them onto a graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// Which store a parameter lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StoreKind {
    Frozen,
    Bridge,
}

impl StoreKind {
    pub fn prefix(self) -> &'static str {
        match self {
            StoreKind::Frozen => "frozen/",
            StoreKind::Bridge => "bridge/",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub kind: StoreKind,
    pub index: usize,
}

/// An ordered list of named tensors. Names carry the store prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    kind: StoreKind,
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(kind: StoreKind) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = format!("{}{name}", self.kind.prefix());
        assert!(
            self.entries.iter().all(|(n, _)| n != &full),
            "duplicate parameter {full}"
        );
        self.entries.push((full, value));
        ParamId {
            kind: self.kind,
            index: self.entries.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        debug_assert_eq!(id.kind, self.kind);
        &self.entries[id.index].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        debug_assert_eq!(id.kind, self.kind);
        &mut self.entries[id.index].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.index].0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        let kind = self.kind;
        (0..self.entries.len()).map(move |index| ParamId { kind, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(|index| ParamId {
            kind: self.kind,
            index,
        })
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            kind: self.kind,
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian f32 payloads.
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &x in t.data() {
                h.update((x.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameter initializer. Without an RNG every tensor comes out zero, which
/// is what checkpoint loading wants before it overwrites the values.
pub struct Init<'r> {
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Init<'r> {
    pub fn random(rng: &'r mut ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn layout() -> Self {
        Self { rng: None }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        match self.rng.as_deref_mut() {
            Some(rng) => Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound))),
            None => Tensor::zeros(shape),
        }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
            }
            None => Tensor::zeros(shape),
        }
    }

    /// Ones when initializing randomly; zeros in layout mode.
    pub fn ones<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        match self.rng {
            Some(_) => Tensor::ones(shape),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zeros<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }
}

struct Binding<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    trainable: bool,
    vars: Vec<Option<Var>>,
}

/// A graph plus lazily bound parameter stores.
///
/// Parameters of a trainable store become graph params on first use;
/// everything else becomes a constant.
pub struct Session<'a, T: Scalar = f32> {
    pub graph: Graph<T>,
    bindings: [Option<Binding<'a, T>>; 2],
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new() -> Self {
        Self {
            graph: Graph::new(),
            bindings: [None, None],
        }
    }

    pub fn with_store(mut self, store: &'a ParamStore<T>, trainable: bool) -> Self {
        self.bindings[store.kind().slot()] = Some(Binding {
            store,
            trainable,
            vars: vec![None; store.len()],
        });
        self
    }

    fn binding(&self, kind: StoreKind) -> Result<&Binding<'a, T>> {
        self.bindings[kind.slot()]
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("no {kind:?} store bound to session")))
    }

    /// The graph node for a parameter, binding it on first use.
    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        let binding = self.binding(id.kind)?;
        if let Some(v) = binding.vars[id.index] {
            return Ok(v);
        }
        let value = binding.store.get(id).clone();
        let v = if binding.trainable {
            self.graph.param(value)?
        } else {
            self.graph.constant(value)?
        };
        self.bindings[id.kind.slot()].as_mut().unwrap().vars[id.index] = Some(v);
        Ok(v)
    }

    /// A fresh constant copy of a parameter; no gradient flows through it.
    pub fn detached(&mut self, id: ParamId) -> Result<Var> {
        let value = self.binding(id.kind)?.store.get(id).clone();
        self.graph.constant(value)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Gradients of `loss` with respect to every parameter of every
    /// trainable store. Parameters the loss never touched get zeros.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let mut leaf = self.graph.backward(loss)?;
        let mut map = BTreeMap::new();
        for binding in self.bindings.iter().flatten().filter(|b| b.trainable) {
            for id in binding.store.ids() {
                let grad = match binding.vars[id.index] {
                    Some(v) => leaf.take(v).expect("trainable leaf has a gradient"),
                    None => Tensor::zeros(binding.store.get(id).shape()),
                };
                map.insert(id, (binding.store.name(id).to_string(), grad));
            }
        }
        Ok(Gradients { map })
    }
}

impl<T: Scalar> Default for Session<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients from [`Session::gradients`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    map: BTreeMap<ParamId, (String, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Result<&Tensor<T>> {
        self.map
            .get(&id)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingGradient(format!("{:?}#{}", id.kind, id.index)))
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .values()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.values().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(&id, (_, t))| (id, t))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (id, (name, t)) in &other.map {
            match self.map.get_mut(id) {
                Some((_, acc)) => {
                    acc.same_shape(t, "accumulate")?;
                    for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(*id, (name.clone(), t.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        let f = T::of(factor);
        for (_, t) in self.map.values_mut() {
            for x in t.data_mut() {
                *x *= f;
            }
        }
    }
}
