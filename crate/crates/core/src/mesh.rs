//! The `(R, U)` process mesh that composes Ring and Ulysses parallelism.
//!
//! Ranks are laid out ulysses-fastest: `rank = ring_index · U + ulysses_index`.
//! Ulysses groups are therefore contiguous rank ranges and ring groups are
//! strided. With `N = 4, (R, U) = (2, 2)` the Ulysses groups are `{0,1}` and
//! `{2,3}` and the ring groups are `{0,2}` and `{1,3}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{ProcessGroup, Rank};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MeshError {
    #[error("{what} must be at least 1")]
    Zero { what: &'static str },

    #[error(
        "no mesh for {workers} workers with max_ring_dim_size={max_ring} and {heads} heads: \
         every divisor R ≤ {max_ring} of {workers} leaves U = {workers}/R not dividing {heads}"
    )]
    Infeasible {
        workers: usize,
        max_ring: usize,
        heads: usize,
    },

    #[error("ring size {ring} times ulysses size {ulysses} is not {workers}")]
    Shape {
        ring: usize,
        ulysses: usize,
        workers: usize,
    },

    #[error("{heads} heads are not divisible by the ulysses size {ulysses}")]
    Heads { heads: usize, ulysses: usize },

    #[error("sequence length {seq_len} is not divisible by {workers} workers")]
    Sequence { seq_len: usize, workers: usize },

    #[error("rank {rank} is outside a mesh of {workers} workers")]
    RankOutOfRange { rank: Rank, workers: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(try_from = "MeshShape")]
pub struct Mesh2D {
    ring: usize,
    ulysses: usize,
}

#[derive(Deserialize)]
struct MeshShape {
    ring: usize,
    ulysses: usize,
}

impl TryFrom<MeshShape> for Mesh2D {
    type Error = MeshError;
    fn try_from(m: MeshShape) -> Result<Self, MeshError> {
        if m.ring == 0 || m.ulysses == 0 {
            return Err(MeshError::Zero { what: "mesh dimension" });
        }
        Ok(Mesh2D {
            ring: m.ring,
            ulysses: m.ulysses,
        })
    }
}

impl Serialize for Mesh2D {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Report {
            workers: usize,
            ring: usize,
            ulysses: usize,
            ring_groups: Vec<ProcessGroup>,
            ulysses_groups: Vec<ProcessGroup>,
        }
        Report {
            workers: self.workers(),
            ring: self.ring,
            ulysses: self.ulysses,
            ring_groups: self.ring_groups(),
            ulysses_groups: self.ulysses_groups(),
        }
        .serialize(s)
    }
}

/// Picks the mesh for `workers` ranks.
///
/// `R` is the largest divisor of `workers` not exceeding `max_ring` for which
/// `U = workers / R` divides `heads`; everything beyond the ring cap goes to
/// the Ulysses dimension.
pub fn build_mesh(workers: usize, max_ring: usize, heads: usize) -> Result<Mesh2D, MeshError> {
    for (what, v) in [
        ("worker count", workers),
        ("max_ring_dim_size", max_ring),
        ("head count", heads),
    ] {
        if v == 0 {
            return Err(MeshError::Zero { what });
        }
    }
    (1..=max_ring.min(workers))
        .rev()
        .filter(|r| workers.is_multiple_of(*r))
        .find(|r| heads.is_multiple_of(workers / r))
        .map(|ring| Mesh2D {
            ring,
            ulysses: workers / ring,
        })
        .ok_or(MeshError::Infeasible {
            workers,
            max_ring,
            heads,
        })
}

/// Every feasible mesh for `workers` ranks and `heads` heads, by ascending `R`.
pub fn feasible_meshes(workers: usize, heads: usize) -> Vec<Mesh2D> {
    (1..=workers)
        .filter(|r| workers.is_multiple_of(*r) && heads.is_multiple_of(workers / r))
        .map(|ring| Mesh2D {
            ring,
            ulysses: workers / ring,
        })
        .collect()
}

impl Mesh2D {
    pub fn with_shape(ring: usize, ulysses: usize, heads: usize) -> Result<Self, MeshError> {
        if ring == 0 || ulysses == 0 {
            return Err(MeshError::Zero { what: "mesh dimension" });
        }
        if heads == 0 || !heads.is_multiple_of(ulysses) {
            return Err(MeshError::Heads { heads, ulysses });
        }
        Ok(Self { ring, ulysses })
    }

    pub fn workers(&self) -> usize {
        self.ring * self.ulysses
    }

    pub fn ring_size(&self) -> usize {
        self.ring
    }

    pub fn ulysses_size(&self) -> usize {
        self.ulysses
    }

    fn check(&self, rank: Rank) -> Result<(), MeshError> {
        if rank >= self.workers() {
            return Err(MeshError::RankOutOfRange {
                rank,
                workers: self.workers(),
            });
        }
        Ok(())
    }

    pub fn ring_index(&self, rank: Rank) -> Result<usize, MeshError> {
        self.check(rank)?;
        Ok(rank / self.ulysses)
    }

    pub fn ulysses_index(&self, rank: Rank) -> Result<usize, MeshError> {
        self.check(rank)?;
        Ok(rank % self.ulysses)
    }

    /// Ranks sharing `rank`'s Ulysses index, ordered by ring index.
    pub fn ring_group(&self, rank: Rank) -> Result<ProcessGroup, MeshError> {
        let u = self.ulysses_index(rank)?;
        Ok(self.ring_group_at(u))
    }

    /// Ranks sharing `rank`'s ring index, ordered by Ulysses index.
    pub fn ulysses_group(&self, rank: Rank) -> Result<ProcessGroup, MeshError> {
        let r = self.ring_index(rank)?;
        Ok(self.ulysses_group_at(r))
    }

    fn ring_group_at(&self, ulysses_index: usize) -> ProcessGroup {
        let members = (0..self.ring).map(|r| r * self.ulysses + ulysses_index).collect();
        ProcessGroup::new(members).expect("distinct ranks")
    }

    fn ulysses_group_at(&self, ring_index: usize) -> ProcessGroup {
        let members = (0..self.ulysses).map(|u| ring_index * self.ulysses + u).collect();
        ProcessGroup::new(members).expect("distinct ranks")
    }

    pub fn ring_groups(&self) -> Vec<ProcessGroup> {
        (0..self.ulysses).map(|u| self.ring_group_at(u)).collect()
    }

    pub fn ulysses_groups(&self) -> Vec<ProcessGroup> {
        (0..self.ring).map(|r| self.ulysses_group_at(r)).collect()
    }

    /// Checks that a `[B, H, S, D]` problem can be sharded over this mesh.
    pub fn validate_problem(&self, heads: usize, seq_len: usize) -> Result<(), MeshError> {
        if !heads.is_multiple_of(self.ulysses) {
            return Err(MeshError::Heads {
                heads,
                ulysses: self.ulysses,
            });
        }
        if !seq_len.is_multiple_of(self.workers()) {
            return Err(MeshError::Sequence {
                seq_len,
                workers: self.workers(),
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for Mesh2D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(R={}, U={})", self.ring, self.ulysses)
    }
}
