use std::ops::Range;

use serde::{Deserialize, Serialize};

/// A named contiguous range inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    total: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, name: impl Into<String>, len: usize) -> usize {
        let offset = self.total;
        self.slots.push(ParamSlot {
            name: name.into(),
            offset,
            len,
        });
        self.total += len;
        offset
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Slots whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a ParamSlot> + 'a {
        self.slots.iter().filter(move |s| s.name.starts_with(prefix))
    }
}
