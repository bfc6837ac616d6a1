//! Dense row-major tensors carrying a subsystem tag for memory accounting.

use std::fmt;
use std::sync::Arc;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;

/// Subsystem that owns a tensor. The ledger partitions retained bytes by tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Backbone,
    Adaptation,
    Head,
    Data,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::Backbone, Tag::Adaptation, Tag::Head, Tag::Data];

    pub fn index(self) -> usize {
        match self {
            Tag::Backbone => 0,
            Tag::Adaptation => 1,
            Tag::Head => 2,
            Tag::Data => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Backbone => "backbone",
            Tag::Adaptation => "adaptation",
            Tag::Head => "head",
            Tag::Data => "data",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Active element width. Values are always stored as `f64`; in `F32` mode every
/// operation output is rounded to single precision and the ledger counts 4 bytes
/// per element.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }

    pub(crate) fn round(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Identity of a node inside a [`Graph`](crate::graph::Graph).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    tag: Tag,
    requires_grad: bool,
    node: Option<NodeId>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tag", &self.tag)
            .field("requires_grad", &self.requires_grad)
            .field("node", &self.node)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, tag: Tag) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape, Arc::new(data), tag))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, tag: Tag) -> Self {
        Self {
            shape,
            data,
            tag,
            requires_grad: false,
            node: None,
        }
    }

    pub fn zeros(shape: &[usize], tag: Tag) -> Self {
        Self::full(shape, 0.0, tag)
    }

    pub fn full(shape: &[usize], value: f64, tag: Tag) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![value; n]), tag)
    }

    pub fn scalar(value: f64, tag: Tag) -> Self {
        Self::from_parts(vec![1], Arc::new(vec![value]), tag)
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[&[f64]], tag: Tag) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::invalid("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data, tag)
    }

    pub fn identity(n: usize, tag: Tag) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], Arc::new(data), tag)
    }

    /// Marks the tensor as a trainable leaf.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.requires_grad = false;
        self
    }

    pub(crate) fn with_node(mut self, node: NodeId, requires_grad: bool) -> Self {
        self.node = Some(node);
        self.requires_grad = requires_grad;
        self
    }

    /// Same values under a new shape; tag and grad flag are kept.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let mut t = Self::from_parts(shape.to_vec(), self.data.clone(), self.tag);
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    /// Copy of the values with the same tag, detached from any graph.
    pub fn detached(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone(), self.tag)
    }

    /// Same tag and grad flag, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, TensorError> {
        let mut t = Self::new(self.shape.clone(), data, self.tag)?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn tag(&self) -> Tag {
        self.tag
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn bytes(&self, width: usize) -> usize {
        self.numel() * width
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[..self.shape.len() - 1].iter().product()
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
