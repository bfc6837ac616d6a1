//! Named parameter storage and per-graph binding.

use std::collections::HashMap;
use std::ops::Index;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::tensor::{NodeId, Tag, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered set of named tensors. Insertion order is the canonical order used by
/// the optimizer, the weight file and parameter counts.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; names are built by module code, not users.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.tensors.len());
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        let flag = tensor.requires_grad();
        let t = tensor.detached();
        self.tensors.push(if flag { t.trainable() } else { t });
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.ids()
            .map(|id| (id, self.names[id.0].as_str(), &self.tensors[id.0]))
    }

    /// Replaces values, keeping tag and grad flag.
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let t = self.tensors[id.0].with_data(data)?;
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let t = self.tensors[id.0].detached();
        self.tensors[id.0] = if trainable { t.trainable() } else { t.frozen() };
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).requires_grad()).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn count_tagged(&self, tag: Tag) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.tag() == tag)
            .map(Tensor::numel)
            .sum()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding {
            nodes: self.tensors.iter().map(|t| g.leaf(t)).collect(),
        }
    }

    /// Like [`bind`](Self::bind) but every leaf is a constant under its own tag.
    pub fn bind_frozen(&self, g: &mut Graph) -> Binding {
        Binding {
            nodes: self.tensors.iter().map(|t| g.constant(t, t.tag())).collect(),
        }
    }

    /// Binds `ids[i]` to `nodes[i]` and every other parameter as a constant.
    pub fn bind_with(&self, g: &mut Graph, ids: &[ParamId], nodes: &[NodeId]) -> Binding {
        let mut b = self.bind_frozen(g);
        for (id, &n) in ids.iter().zip(nodes) {
            b.nodes[id.0] = n;
        }
        b
    }

    /// Copies values of same-named, same-shaped parameters from `other`.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in other {
            let Some(id) = self.id(name) else {
                return Err(Error::Format(format!("unknown parameter {name}")));
            };
            if self.get(id).shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    t.shape(),
                    self.get(id).shape()
                )));
            }
            self.set_data(id, t.to_vec())?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Graph nodes of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Gradient of each listed parameter; parameters the loss never reached get
    /// `None`.
    pub fn grads<'a>(&self, grads: &'a Gradients, ids: &[ParamId]) -> Vec<Option<&'a Tensor>> {
        ids.iter().map(|&id| grads.get(self.nodes[id.0])).collect()
    }
}

impl Index<ParamId> for Binding {
    type Output = NodeId;

    fn index(&self, id: ParamId) -> &NodeId {
        &self.nodes[id.0]
    }
}
