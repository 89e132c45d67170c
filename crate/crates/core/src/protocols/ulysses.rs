//! Head-parallel attention: one all-to-all trades sequence shards for head
//! shards, attention runs on the full sequence, a second all-to-all trades
//! back.

use crate::error::{Axis, Error, Result};
use crate::fabric::{ProcessGroup, Worker};
use crate::fp8::scale_for;
use crate::tensor::{attention_with_lse, Tensor4};

use super::wire::{put_f32, put_scaled, Reader};
use super::CommOptions;

fn position(w: &Worker, group: &ProcessGroup) -> Result<usize> {
    group.position(w.rank()).ok_or_else(|| Error::Protocol {
        rank: w.rank(),
        message: format!("rank is not a member of {group}"),
    })
}

fn inconsistent(w: &Worker, from: usize, e: Error) -> Error {
    Error::Protocol {
        rank: w.rank(),
        message: format!("inconsistent shapes across ranks (payload from {from}): {e}"),
    }
}

/// Input reshard: `[B, H, S/U, D]` for each of q, k, v becomes
/// `[B, H/U, S, D]`, where `S` here is the group's combined sequence.
///
/// Q, K and V travel in a single collective. With `fp8`, each rank quantizes
/// its whole local K (and V) with one scale and sends each destination its
/// head slice of the codes.
pub async fn ulysses_scatter(
    w: &Worker,
    q: &Tensor4<f32>,
    k: &Tensor4<f32>,
    v: &Tensor4<f32>,
    group: &ProcessGroup,
    fp8: bool,
) -> Result<[Tensor4<f32>; 3]> {
    let u = group.size();
    position(w, group)?;
    let shape = q.shape();
    shape.expect_same(&k.shape(), &[Axis::Batch, Axis::Head, Axis::Seq, Axis::Dim])?;
    shape.expect_same(&v.shape(), &[Axis::Batch, Axis::Head, Axis::Seq, Axis::Dim])?;
    if !shape.heads.is_multiple_of(u) {
        return Err(Error::Indivisible {
            axis: Axis::Head,
            len: shape.heads,
            parts: u,
        });
    }
    let hb = shape.heads / u;
    let scales = if fp8 {
        Some((scale_for(k)?, scale_for(v)?))
    } else {
        None
    };
    let mut payloads = Vec::with_capacity(u);
    for j in 0..u {
        let heads = j * hb..(j + 1) * hb;
        let mut buf = Vec::new();
        put_f32(&mut buf, &q.slice_heads(heads.clone())?);
        match scales {
            Some((sk, sv)) => {
                put_scaled(&mut buf, &k.slice_heads(heads.clone())?, sk);
                put_scaled(&mut buf, &v.slice_heads(heads)?, sv);
            }
            None => {
                put_f32(&mut buf, &k.slice_heads(heads.clone())?);
                put_f32(&mut buf, &v.slice_heads(heads)?);
            }
        }
        payloads.push(buf);
    }
    let received = w.all_to_all(group, payloads).await?;
    let piece = shape.with_heads(hb);
    let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    for (j, bytes) in received.iter().enumerate() {
        let from = group.member(j);
        let mut r = Reader::new(bytes);
        let decoded = (|| {
            let parts = (r.tensor(piece, false)?, r.tensor(piece, fp8)?, r.tensor(piece, fp8)?);
            r.finish()?;
            Ok(parts)
        })()
        .map_err(|e| inconsistent(w, from, e))?;
        qs.push(decoded.0);
        ks.push(decoded.1);
        vs.push(decoded.2);
    }
    Ok([
        Tensor4::concat_seq(&qs)?,
        Tensor4::concat_seq(&ks)?,
        Tensor4::concat_seq(&vs)?,
    ])
}

/// Output reshard: `[B, H/U, S, D]` back to `[B, H, S/U, D]`.
pub async fn ulysses_gather(w: &Worker, o: &Tensor4<f32>, group: &ProcessGroup) -> Result<Tensor4<f32>> {
    let u = group.size();
    position(w, group)?;
    let shape = o.shape();
    if !shape.seq.is_multiple_of(u) {
        return Err(Error::Indivisible {
            axis: Axis::Seq,
            len: shape.seq,
            parts: u,
        });
    }
    let sl = shape.seq / u;
    let mut payloads = Vec::with_capacity(u);
    for j in 0..u {
        let mut buf = Vec::new();
        put_f32(&mut buf, &o.slice_seq(j * sl..(j + 1) * sl)?);
        payloads.push(buf);
    }
    let received = w.all_to_all(group, payloads).await?;
    let piece = shape.with_seq(sl);
    let mut parts = Vec::with_capacity(u);
    for (j, bytes) in received.iter().enumerate() {
        let mut r = Reader::new(bytes);
        let t = r.tensor(piece, false).and_then(|t| r.finish().map(|_| t));
        parts.push(t.map_err(|e| inconsistent(w, group.member(j), e))?);
    }
    Tensor4::concat_heads(&parts)
}

/// Ulysses attention within `group`. With a single-member group no
/// collective is issued and the result is plain local attention.
pub async fn ulysses_attention(
    w: &Worker,
    q: &Tensor4<f32>,
    k: &Tensor4<f32>,
    v: &Tensor4<f32>,
    group: &ProcessGroup,
    opts: CommOptions,
) -> Result<Tensor4<f32>> {
    if group.size() == 1 {
        position(w, group)?;
        return Ok(attention_with_lse(q, k, v)?.output);
    }
    let [qh, kh, vh] = ulysses_scatter(w, q, k, v, group, opts.fp8_kv).await?;
    let local = attention_with_lse(&qh, &kh, &vh)?;
    ulysses_gather(w, &local.output, group).await
}
