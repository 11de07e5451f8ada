use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// What a parameter is for; drives freezing, weight decay and adapter-only export.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Base,
    LoraA,
    LoraB,
    LogTemperature,
}

impl ParamKind {
    pub fn is_adapter(self) -> bool {
        matches!(self, ParamKind::LoraA | ParamKind::LoraB)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Named, ordered parameter storage. Insertion order is the serialisation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            kind,
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Matrix<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                format!("{} {:?}", e.name, e.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total scalar count over parameters matching `filter`.
    pub fn count_where(&self, filter: impl Fn(&ParamEntry<T>) -> bool) -> usize {
        self.entries.iter().filter(|e| filter(e)).map(|e| e.value.len()).sum()
    }

    /// Removes adapter parameters. They are always appended after the base
    /// parameters, so base ids stay valid.
    pub fn drop_adapters(&mut self) {
        let first = self
            .entries
            .iter()
            .position(|e| e.kind.is_adapter())
            .unwrap_or(self.entries.len());
        assert!(
            self.entries[first..].iter().all(|e| e.kind.is_adapter()),
            "adapters must form the tail of the store"
        );
        for e in self.entries.drain(first..) {
            self.by_name.remove(&e.name);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Lazily materialises parameters as graph leaves, once per forward pass.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    nodes: Vec<Option<NodeId>>,
    frozen: bool,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: vec![None; store.len()],
            frozen: false,
        }
    }

    /// Binds every parameter without gradient tracking, regardless of its flag.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self {
            frozen: true,
            ..Self::new(store)
        }
    }

    pub fn node(&mut self, graph: &mut Graph<T>, id: ParamId) -> NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let e = self.store.entry(id);
        let n = graph.leaf(e.value.clone(), e.trainable && !self.frozen);
        self.nodes[id.0] = Some(n);
        n
    }

    /// Parameters that were bound during the pass, with their leaf nodes.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (ParamId(i), n)))
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }
}
