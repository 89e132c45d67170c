//! Distributed attention over the fabric: Ulysses, serial and pipelined Ring,
//! and their composition on a 2D mesh.
//!
//! Every protocol takes sequence-sharded `[B, H, S/N, D]` inputs on each rank
//! and returns that rank's sequence shard of the attention output.

mod ring;
mod timeline;
mod ulysses;
mod usp;
mod wire;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};
use crate::tensor::{Element, Tensor4};

pub use ring::{ring_attention, ring_attention_pipelined, ring_attention_serial, RingOutput};
pub use timeline::{Event, Timeline};
pub use ulysses::{ulysses_attention, ulysses_gather, ulysses_scatter};
pub use usp::{usp_attention, UspOutput};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommOptions {
    /// Quantize K/V payloads to E4M3 with a per-tensor scale.
    #[serde(default)]
    pub fp8_kv: bool,
    /// Use the double-buffered ring schedule.
    #[serde(default)]
    pub pipelined_ring: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShardAxis {
    Sequence,
    Head,
}

impl ShardAxis {
    fn axis(self) -> Axis {
        match self {
            ShardAxis::Sequence => Axis::Seq,
            ShardAxis::Head => Axis::Head,
        }
    }
}

/// Shard `index` of `count` equal pieces along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSpec {
    pub axis: ShardAxis,
    pub index: usize,
    pub count: usize,
}

impl ShardSpec {
    pub fn sequence(index: usize, count: usize) -> Self {
        Self {
            axis: ShardAxis::Sequence,
            index,
            count,
        }
    }

    pub fn head(index: usize, count: usize) -> Self {
        Self {
            axis: ShardAxis::Head,
            index,
            count,
        }
    }

    /// Element range this shard covers on an axis of length `len`.
    pub fn range(&self, len: usize) -> Result<Range<usize>> {
        if self.count == 0 || self.index >= self.count {
            return Err(Error::Coverage(format!(
                "shard index {} out of {} shards",
                self.index, self.count
            )));
        }
        if !len.is_multiple_of(self.count) {
            return Err(Error::Indivisible {
                axis: self.axis.axis(),
                len,
                parts: self.count,
            });
        }
        let size = len / self.count;
        Ok(self.index * size..(self.index + 1) * size)
    }

    pub fn apply<T: Element>(&self, t: &Tensor4<T>) -> Result<Tensor4<T>> {
        let len = t.shape().len(self.axis.axis());
        let range = self.range(len)?;
        match self.axis {
            ShardAxis::Sequence => t.slice_seq(range),
            ShardAxis::Head => t.slice_heads(range),
        }
    }
}

/// Splits `t` into `count` equal sequence shards, in order.
pub fn split_sequence<T: Element>(t: &Tensor4<T>, count: usize) -> Result<Vec<Tensor4<T>>> {
    (0..count).map(|i| ShardSpec::sequence(i, count).apply(t)).collect()
}

/// A piece of the output starting at sequence position `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqShard<T = f32> {
    pub start: usize,
    pub data: Tensor4<T>,
}

/// Reassembles sequence shards into one tensor. The shards may arrive in any
/// order but must tile `[0, S)` with no gap and no overlap.
pub fn gather_output<T: Element>(mut shards: Vec<SeqShard<T>>) -> Result<Tensor4<T>> {
    if shards.is_empty() {
        return Err(Error::Coverage("no shards".into()));
    }
    shards.sort_by_key(|s| s.start);
    let mut cursor = 0;
    for s in &shards {
        let len = s.data.shape().seq;
        if s.start > cursor {
            return Err(Error::Coverage(format!("gap over [{cursor}, {})", s.start)));
        }
        if s.start < cursor {
            return Err(Error::Coverage(format!(
                "shard at {} overlaps [{}, {cursor})",
                s.start, s.start
            )));
        }
        cursor += len;
    }
    let parts: Vec<Tensor4<T>> = shards.into_iter().map(|s| s.data).collect();
    Tensor4::concat_seq(&parts)
}

/// Gathers shards given in rank order, each starting where the previous ended.
pub fn gather_in_order<T: Element>(parts: Vec<Tensor4<T>>) -> Result<Tensor4<T>> {
    let mut start = 0;
    let shards = parts
        .into_iter()
        .map(|data| {
            let s = SeqShard { start, data };
            start += s.data.shape().seq;
            s
        })
        .collect();
    gather_output(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::TensorRng;
    use crate::tensor::Shape4;

    #[test]
    fn shard_spec_ranges() {
        assert_eq!(ShardSpec::sequence(1, 4).range(16).unwrap(), 4..8);
        assert!(ShardSpec::sequence(4, 4).range(16).is_err());
        assert!(matches!(
            ShardSpec::head(0, 3).range(8),
            Err(Error::Indivisible { axis: Axis::Head, .. })
        ));
    }

    #[test]
    fn split_then_gather_roundtrips() {
        let t: Tensor4<f32> = TensorRng::new(1).tensor(Shape4::new(1, 2, 8, 3), -1.0, 1.0);
        let parts = split_sequence(&t, 4).unwrap();
        assert_eq!(gather_in_order(parts).unwrap(), t);
        assert_eq!(gather_in_order(vec![t.clone()]).unwrap(), t);
    }

    #[test]
    fn gather_rejects_gap_and_overlap() {
        let t: Tensor4<f32> = TensorRng::new(2).tensor(Shape4::new(1, 1, 4, 2), -1.0, 1.0);
        let a = t.slice_seq(0..2).unwrap();
        let b = t.slice_seq(2..4).unwrap();
        let gap = vec![
            SeqShard {
                start: 0,
                data: a.clone(),
            },
            SeqShard {
                start: 3,
                data: b.clone(),
            },
        ];
        assert!(matches!(gather_output(gap), Err(Error::Coverage(m)) if m.contains("gap")));
        let overlap = vec![
            SeqShard {
                start: 0,
                data: a.clone(),
            },
            SeqShard {
                start: 1,
                data: b.clone(),
            },
        ];
        assert!(matches!(gather_output(overlap), Err(Error::Coverage(m)) if m.contains("overlaps")));
        let shuffled = vec![SeqShard { start: 2, data: b }, SeqShard { start: 0, data: a }];
        assert_eq!(gather_output(shuffled).unwrap(), t);
    }
}
