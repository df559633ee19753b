//! Flat parameter vectors with named, shaped blocks.
//!
//! Every learnable tensor lives in one `Vec<f64>`; a [`Layout`] records
//! where each block starts. Gradients, optimizer moments and checkpoints
//! share the same layout.

use std::ops::Range;

use dgdetr_core::RngStream;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Square identity matrix.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot(&self) -> Slot {
        Slot { offset: self.offset, len: self.len() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    blocks: Vec<BlockInfo>,
    total: usize,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
        let block = BlockInfo { name: name.into(), shape: shape.to_vec(), offset: self.total, init };
        let slot = block.slot();
        self.total += slot.len;
        self.blocks.push(block);
        slot
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&BlockInfo> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Draws initial values block by block, in layout order.
    pub fn initialize(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for b in &self.blocks {
            match b.init {
                Init::Zeros => out.extend(std::iter::repeat_n(0.0, b.len())),
                Init::Ones => out.extend(std::iter::repeat_n(1.0, b.len())),
                Init::Normal(std) => out.extend((0..b.len()).map(|_| std * rng.normal())),
                Init::Identity => {
                    let n = b.shape[0];
                    out.extend((0..b.len()).map(|i| if i / n == i % n { 1.0 } else { 0.0 }));
                }
            }
        }
        out
    }
}

/// Disjoint mutable views of `buf`; slots must be given in increasing,
/// non-overlapping order.
pub fn slots_mut<const N: usize>(buf: &mut [f64], slots: [Slot; N]) -> [&mut [f64]; N] {
    let mut out = Vec::with_capacity(N);
    let mut rest = buf;
    let mut consumed = 0;
    for s in slots {
        assert!(s.offset >= consumed, "slots must be increasing and disjoint");
        let (_, tail) = rest.split_at_mut(s.offset - consumed);
        let (head, tail) = tail.split_at_mut(s.len);
        out.push(head);
        rest = tail;
        consumed = s.offset + s.len;
    }
    match out.try_into() {
        Ok(arr) => arr,
        Err(_) => unreachable!(),
    }
}
