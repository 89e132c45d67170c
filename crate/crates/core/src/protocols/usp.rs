use serde::Serialize;

use crate::error::{Axis, Error, Result};
use crate::fabric::Worker;
use crate::mesh::{Mesh2D, MeshError};
use crate::tensor::Tensor4;

use super::ring::ring_attention;
use super::timeline::Timeline;
use super::ulysses::{ulysses_gather, ulysses_scatter};
use super::CommOptions;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UspOutput {
    #[serde(skip)]
    pub output: Tensor4<f32>,
    /// The ring phase's schedule; empty of transfers when `R = 1`.
    pub timeline: Timeline,
}

/// Ulysses within the rank's Ulysses group around ring attention within its
/// ring group.
///
/// Inputs are this rank's `[B, H, S/N, D]` sequence shard, where shard `i`
/// belongs to rank `i`. A mesh dimension of 1 skips that phase entirely, so
/// `(1, N)` is pure Ulysses and `(N, 1)` is pure Ring.
pub async fn usp_attention(
    w: &Worker,
    q: &Tensor4<f32>,
    k: &Tensor4<f32>,
    v: &Tensor4<f32>,
    mesh: &Mesh2D,
    opts: CommOptions,
) -> Result<UspOutput> {
    if mesh.workers() != w.world_size() {
        return Err(Error::Mesh(MeshError::Shape {
            ring: mesh.ring_size(),
            ulysses: mesh.ulysses_size(),
            workers: w.world_size(),
        }));
    }
    let shape = q.shape();
    let all = [Axis::Batch, Axis::Head, Axis::Seq, Axis::Dim];
    shape.expect_same(&k.shape(), &all)?;
    shape.expect_same(&v.shape(), &all)?;
    mesh.validate_problem(shape.heads, shape.seq * mesh.workers())?;

    let ug = mesh.ulysses_group(w.rank())?;
    let rg = mesh.ring_group(w.rank())?;
    let u = mesh.ulysses_size();

    let scattered;
    let (qh, kh, vh) = if u > 1 {
        scattered = ulysses_scatter(w, q, k, v, &ug, opts.fp8_kv).await?;
        (&scattered[0], &scattered[1], &scattered[2])
    } else {
        (q, k, v)
    };
    let ring = ring_attention(w, qh, kh, vh, &rg, opts).await?;
    let output = if u > 1 {
        ulysses_gather(w, &ring.result.output, &ug).await?
    } else {
        ring.result.output
    };
    Ok(UspOutput {
        output,
        timeline: ring.timeline,
    })
}
