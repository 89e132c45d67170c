//! Sequence-parallel ring attention. K/V chunks travel to the next ring
//! position for `R - 1` hops while each rank folds partial results into its
//! running output with the log-sum-exp merge.

use serde::Serialize;

use crate::error::{Axis, Error, Result};
use crate::fabric::{ProcessGroup, Rank, Worker};
use crate::tensor::{attention_with_lse, merge_lse, AttnResult, Tensor4};

use super::timeline::{Event, Timeline};
use super::wire::{put, Reader};
use super::CommOptions;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RingOutput {
    #[serde(skip)]
    pub result: AttnResult<f32>,
    pub timeline: Timeline,
}

struct Ring {
    next: Rank,
    prev: Rank,
    size: usize,
}

fn ring_of(w: &Worker, group: &ProcessGroup) -> Result<Ring> {
    let pos = group.position(w.rank()).ok_or_else(|| Error::Protocol {
        rank: w.rank(),
        message: format!("rank is not a member of ring {group}"),
    })?;
    let r = group.size();
    Ok(Ring {
        next: group.member((pos + 1) % r),
        prev: group.member((pos + r - 1) % r),
        size: r,
    })
}

fn check_shapes(q: &Tensor4<f32>, k: &Tensor4<f32>, v: &Tensor4<f32>) -> Result<()> {
    let all = [Axis::Batch, Axis::Head, Axis::Seq, Axis::Dim];
    k.shape().expect_same(&v.shape(), &all)?;
    q.shape().expect_same(&k.shape(), &all)
}

fn encode_kv(k: &Tensor4<f32>, v: &Tensor4<f32>, fp8: bool) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    put(&mut buf, k, fp8)?;
    put(&mut buf, v, fp8)?;
    Ok(buf)
}

fn decode_kv(
    w: &Worker,
    from: Rank,
    bytes: &[u8],
    like: &Tensor4<f32>,
    fp8: bool,
) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    let mut r = Reader::new(bytes);
    let kv = (|| {
        let kv = (r.tensor(like.shape(), fp8)?, r.tensor(like.shape(), fp8)?);
        Ok(kv)
    })();
    kv.and_then(|kv| r.finish().map(|_| kv))
        .map_err(|e: Error| Error::Protocol {
            rank: w.rank(),
            message: format!("inconsistent K/V chunk from {from}: {e}"),
        })
}

/// Ring attention with blocking transfers: each hop's chunk is received
/// before anything else happens.
pub async fn ring_attention_serial(
    w: &Worker,
    q: &Tensor4<f32>,
    k: &Tensor4<f32>,
    v: &Tensor4<f32>,
    group: &ProcessGroup,
    opts: CommOptions,
) -> Result<RingOutput> {
    check_shapes(q, k, v)?;
    let ring = ring_of(w, group)?;
    let mut tl = Timeline::default();
    let mut acc = attention_with_lse(q, k, v)?;
    tl.push(Event::Compute { block: 0 });
    let (mut ck, mut cv) = (k.clone(), v.clone());
    for i in 1..ring.size {
        w.send(ring.next, encode_kv(&ck, &cv, opts.fp8_kv)?)?;
        tl.push(Event::SendIssued { transfer: i });
        let req = w.irecv(ring.prev)?;
        tl.push(Event::RecvIssued { transfer: i });
        let bytes = w.wait(req).await?;
        tl.push(Event::Synced { transfer: i });
        (ck, cv) = decode_kv(w, ring.prev, &bytes, k, opts.fp8_kv)?;
        let part = attention_with_lse(q, &ck, &cv)?;
        tl.push(Event::Compute { block: i });
        acc = merge_lse(&acc, &part)?;
        tl.push(Event::Merge { block: i });
    }
    Ok(RingOutput {
        result: acc,
        timeline: tl,
    })
}

/// Double-buffered ring attention.
///
/// The first remote chunk is requested (and the local chunk sent) before the
/// local block is computed. Each iteration then waits for the pending chunk,
/// immediately forwards it and posts the next receive, and only then computes
/// on it, so the following transfer overlaps this block's compute. Chunks
/// arrive in the same order as in [`ring_attention_serial`], so the merged
/// result is bit-identical.
pub async fn ring_attention_pipelined(
    w: &Worker,
    q: &Tensor4<f32>,
    k: &Tensor4<f32>,
    v: &Tensor4<f32>,
    group: &ProcessGroup,
    opts: CommOptions,
) -> Result<RingOutput> {
    check_shapes(q, k, v)?;
    let ring = ring_of(w, group)?;
    let mut tl = Timeline::default();
    let mut pending = None;
    if ring.size > 1 {
        pending = Some(w.irecv(ring.prev)?);
        tl.push(Event::RecvIssued { transfer: 1 });
        w.send(ring.next, encode_kv(k, v, opts.fp8_kv)?)?;
        tl.push(Event::SendIssued { transfer: 1 });
    }
    let mut acc = attention_with_lse(q, k, v)?;
    tl.push(Event::Compute { block: 0 });
    for i in 1..ring.size {
        let req = pending.take().expect("a transfer is pending for every remote block");
        let bytes = w.wait(req).await?;
        tl.push(Event::Synced { transfer: i });
        let (bk, bv) = decode_kv(w, ring.prev, &bytes, k, opts.fp8_kv)?;
        if i + 1 < ring.size {
            pending = Some(w.irecv(ring.prev)?);
            tl.push(Event::RecvIssued { transfer: i + 1 });
            w.send(ring.next, encode_kv(&bk, &bv, opts.fp8_kv)?)?;
            tl.push(Event::SendIssued { transfer: i + 1 });
        }
        let part = attention_with_lse(q, &bk, &bv)?;
        tl.push(Event::Compute { block: i });
        acc = merge_lse(&acc, &part)?;
        tl.push(Event::Merge { block: i });
    }
    Ok(RingOutput {
        result: acc,
        timeline: tl,
    })
}

/// Dispatches on `opts.pipelined_ring`.
pub async fn ring_attention(
    w: &Worker,
    q: &Tensor4<f32>,
    k: &Tensor4<f32>,
    v: &Tensor4<f32>,
    group: &ProcessGroup,
    opts: CommOptions,
) -> Result<RingOutput> {
    if opts.pipelined_ring {
        ring_attention_pipelined(w, q, k, v, group, opts).await
    } else {
        ring_attention_serial(w, q, k, v, group, opts).await
    }
}
