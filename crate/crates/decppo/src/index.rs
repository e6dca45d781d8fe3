//! Mixed-radix codec between joint indices and per-agent local tuples.
//!
//! Joint states and joint actions are stored as flat indices; the codec
//! maps them to and from per-agent component tuples. Agent 0 is the most
//! significant digit, so the flat index enumerates the last agent's
//! components fastest.

use serde::{Deserialize, Serialize};

/// Flat index into the joint state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JointState(pub usize);

/// One agent's local state index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocalState(pub usize);

/// Flat index into the joint action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JointAction(pub usize);

/// One agent's local action index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocalAction(pub usize);

/// Mixed-radix codec over per-agent component counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedRadix {
    radices: Vec<usize>,
    /// Place value of each digit; `strides[k] = product of radices after k`.
    strides: Vec<usize>,
    total: usize,
}

impl MixedRadix {
    /// Build a codec from per-agent component counts. Every radix must be
    /// at least 1.
    pub fn new(radices: &[usize]) -> Self {
        assert!(!radices.is_empty(), "mixed radix needs at least one digit");
        assert!(radices.iter().all(|&r| r >= 1), "radices must be >= 1");
        let mut strides = vec![1usize; radices.len()];
        for k in (0..radices.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * radices[k + 1];
        }
        let total = strides[0] * radices[0];
        MixedRadix {
            radices: radices.to_vec(),
            strides,
            total,
        }
    }

    /// Total number of joint indices.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Number of digits (agents).
    pub fn len(&self) -> usize {
        self.radices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radices.is_empty()
    }

    /// Component count for digit `k`.
    pub fn radix(&self, k: usize) -> usize {
        self.radices[k]
    }

    /// Flatten per-agent components into a joint index.
    pub fn encode(&self, components: &[usize]) -> usize {
        debug_assert_eq!(components.len(), self.radices.len());
        let mut idx = 0;
        for (k, &c) in components.iter().enumerate() {
            debug_assert!(c < self.radices[k], "component {c} out of radix {k}");
            idx += c * self.strides[k];
        }
        idx
    }

    /// Expand a joint index into per-agent components.
    pub fn decode(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0usize; self.radices.len()];
        self.decode_into(index, &mut out);
        out
    }

    /// Expand a joint index into a caller-provided buffer.
    pub fn decode_into(&self, index: usize, out: &mut [usize]) {
        debug_assert!(index < self.total);
        debug_assert_eq!(out.len(), self.radices.len());
        let mut rest = index;
        for k in 0..self.radices.len() {
            out[k] = rest / self.strides[k];
            rest %= self.strides[k];
        }
    }

    /// Component of digit `k` in a joint index, without a full decode.
    pub fn component(&self, index: usize, k: usize) -> usize {
        (index / self.strides[k]) % self.radices[k]
    }

    /// Joint index with digit `k` replaced by `component`.
    pub fn with_component(&self, index: usize, k: usize, component: usize) -> usize {
        debug_assert!(component < self.radices[k]);
        let old = self.component(index, k);
        index - old * self.strides[k] + component * self.strides[k]
    }
}
