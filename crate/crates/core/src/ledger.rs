use serde::{Deserialize, Serialize};

use crate::tensor::Tag;

/// Snapshot of bytes retained for backward, by owning subsystem.
///
/// Only tensors saved by nodes whose backward will run are counted, each once
/// under its own tag. A parameter counts when such a node saves it; values
/// that die after forward never count. Counts are element count times the
/// active element width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLedger {
    pub backbone: usize,
    pub adaptation: usize,
    pub head: usize,
    pub data: usize,
    pub element_width: usize,
}

impl MemoryLedger {
    pub(crate) fn from_counts(counts: [usize; 4], width: usize) -> Self {
        Self {
            backbone: counts[Tag::Backbone.index()],
            adaptation: counts[Tag::Adaptation.index()],
            head: counts[Tag::Head.index()],
            data: counts[Tag::Data.index()],
            element_width: width,
        }
    }

    pub fn get(&self, tag: Tag) -> usize {
        match tag {
            Tag::Backbone => self.backbone,
            Tag::Adaptation => self.adaptation,
            Tag::Head => self.head,
            Tag::Data => self.data,
        }
    }

    pub fn total(&self) -> usize {
        self.backbone + self.adaptation + self.head + self.data
    }
}

impl std::ops::Add for MemoryLedger {
    type Output = MemoryLedger;

    fn add(self, rhs: Self) -> Self {
        Self {
            backbone: self.backbone + rhs.backbone,
            adaptation: self.adaptation + rhs.adaptation,
            head: self.head + rhs.head,
            data: self.data + rhs.data,
            element_width: self.element_width.max(rhs.element_width),
        }
    }
}
