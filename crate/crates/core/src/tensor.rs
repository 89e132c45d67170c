//! Dense `[B, H, S, D]` tensors and exact attention.
//!
//! Everything here is a pure function of its inputs. Workers run in `f32`;
//! oracle checks instantiate the same code at `f64`.
//!
//! The log-sum-exp carried by [`AttnResult`] is the natural log of the softmax
//! denominator over the *scaled* logits `q·k / √D`. An empty key set is
//! represented by `lse = -∞` with a zero output, which is the identity of
//! [`merge_lse`].

use std::ops::Range;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};

/// Scalar types a tensor can hold.
pub trait Element: Float + std::fmt::Debug + Send + Sync + 'static {}

impl Element for f32 {}
impl Element for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub batch: usize,
    pub heads: usize,
    pub seq: usize,
    pub dim: usize,
}

impl Shape4 {
    pub const fn new(batch: usize, heads: usize, seq: usize, dim: usize) -> Self {
        Self { batch, heads, seq, dim }
    }

    pub const fn volume(&self) -> usize {
        self.batch * self.heads * self.seq * self.dim
    }

    pub fn len(&self, axis: Axis) -> usize {
        match axis {
            Axis::Batch => self.batch,
            Axis::Head => self.heads,
            Axis::Seq => self.seq,
            Axis::Dim => self.dim,
        }
    }

    #[inline]
    pub fn offset(&self, b: usize, h: usize, s: usize, d: usize) -> usize {
        ((b * self.heads + h) * self.seq + s) * self.dim + d
    }

    pub fn with_seq(self, seq: usize) -> Self {
        Self { seq, ..self }
    }

    pub fn with_heads(self, heads: usize) -> Self {
        Self { heads, ..self }
    }

    /// Fails naming the first axis in `axes` on which `self` and `other` differ.
    pub fn expect_same(&self, other: &Shape4, axes: &[Axis]) -> Result<()> {
        for &axis in axes {
            if self.len(axis) != other.len(axis) {
                return Err(Error::Shape {
                    axis,
                    expected: self.len(axis),
                    found: other.len(axis),
                });
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.batch, self.heads, self.seq, self.dim)
    }
}

/// Row-major rank-4 tensor, `d` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    pub fn new(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.volume() {
            return Err(Error::DataLength {
                expected: shape.volume(),
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.volume()],
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.volume());
        for b in 0..shape.batch {
            for h in 0..shape.heads {
                for s in 0..shape.seq {
                    for d in 0..shape.dim {
                        data.push(f(b, h, s, d));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, b: usize, h: usize, s: usize, d: usize) -> T {
        self.data[self.shape.offset(b, h, s, d)]
    }

    /// The `D` contiguous values at `(b, h, s)`.
    pub fn row(&self, b: usize, h: usize, s: usize) -> &[T] {
        let start = self.shape.offset(b, h, s, 0);
        &self.data[start..start + self.shape.dim]
    }

    fn row_mut(&mut self, b: usize, h: usize, s: usize) -> &mut [T] {
        let start = self.shape.offset(b, h, s, 0);
        let dim = self.shape.dim;
        &mut self.data[start..start + dim]
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, x| if x.abs() > acc { x.abs() } else { acc })
    }

    pub fn slice_seq(&self, range: Range<usize>) -> Result<Self> {
        self.slice_axis(Axis::Seq, range)
    }

    pub fn slice_heads(&self, range: Range<usize>) -> Result<Self> {
        self.slice_axis(Axis::Head, range)
    }

    fn slice_axis(&self, axis: Axis, range: Range<usize>) -> Result<Self> {
        let len = self.shape.len(axis);
        if range.start > range.end || range.end > len {
            return Err(Error::Shape {
                axis,
                expected: len,
                found: range.end,
            });
        }
        let n = range.end - range.start;
        let shape = match axis {
            Axis::Seq => self.shape.with_seq(n),
            Axis::Head => self.shape.with_heads(n),
            _ => unreachable!("only sequence and head slicing are supported"),
        };
        let mut data = Vec::with_capacity(shape.volume());
        for b in 0..shape.batch {
            for h in 0..shape.heads {
                for s in 0..shape.seq {
                    let (hh, ss) = match axis {
                        Axis::Seq => (h, s + range.start),
                        _ => (h + range.start, s),
                    };
                    data.extend_from_slice(self.row(b, hh, ss));
                }
            }
        }
        Ok(Self { shape, data })
    }

    pub fn concat_seq(parts: &[Self]) -> Result<Self> {
        Self::concat_axis(Axis::Seq, parts)
    }

    pub fn concat_heads(parts: &[Self]) -> Result<Self> {
        Self::concat_axis(Axis::Head, parts)
    }

    fn concat_axis(axis: Axis, parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Coverage("nothing to concatenate".into()))?;
        let keep: &[Axis] = match axis {
            Axis::Seq => &[Axis::Batch, Axis::Head, Axis::Dim],
            _ => &[Axis::Batch, Axis::Seq, Axis::Dim],
        };
        for p in &parts[1..] {
            first.shape.expect_same(&p.shape, keep)?;
        }
        let total: usize = parts.iter().map(|p| p.shape.len(axis)).sum();
        let shape = match axis {
            Axis::Seq => first.shape.with_seq(total),
            _ => first.shape.with_heads(total),
        };
        let mut data = Vec::with_capacity(shape.volume());
        for b in 0..shape.batch {
            match axis {
                Axis::Seq => {
                    for h in 0..shape.heads {
                        for p in parts {
                            for s in 0..p.shape.seq {
                                data.extend_from_slice(p.row(b, h, s));
                            }
                        }
                    }
                }
                _ => {
                    for p in parts {
                        let start = p.shape.offset(b, 0, 0, 0);
                        let len = p.shape.heads * p.shape.seq * p.shape.dim;
                        data.extend_from_slice(&p.data[start..start + len]);
                    }
                }
            }
        }
        Ok(Self { shape, data })
    }

    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&x| U::from(x).expect("float to float cast"))
                .collect(),
        }
    }

    /// Largest elementwise `|self - other|`, evaluated in `f64`.
    pub fn max_abs_diff<U: Element>(&self, other: &Tensor4<U>) -> Result<f64> {
        self.shape
            .expect_same(&other.shape, &[Axis::Batch, Axis::Head, Axis::Seq, Axis::Dim])?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (to_f64(*a) - to_f64(*b)).abs())
            .fold(0.0, f64::max))
    }

    /// `‖self − reference‖_F / ‖reference‖_F`; zero when both are zero.
    pub fn relative_frobenius_error<U: Element>(&self, reference: &Tensor4<U>) -> Result<f64> {
        self.shape
            .expect_same(&reference.shape, &[Axis::Batch, Axis::Head, Axis::Seq, Axis::Dim])?;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (a, r) in self.data.iter().zip(&reference.data) {
            let (a, r) = (to_f64(*a), to_f64(*r));
            num += (a - r) * (a - r);
            den += r * r;
        }
        Ok(if den == 0.0 { num.sqrt() } else { (num / den).sqrt() })
    }
}

impl Tensor4<f32> {
    /// Little-endian `f32` payload, no header.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(shape: Shape4, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != shape.volume() * 4 {
            return Err(Error::Wire(format!(
                "expected {} bytes for {shape}, got {}",
                shape.volume() * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data })
    }
}

fn to_f64<T: Element>(x: T) -> f64 {
    x.to_f64().expect("element converts to f64")
}

/// Output of attention over a (possibly partial) key set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnResult<T = f32> {
    pub output: Tensor4<T>,
    /// One entry per `(b, h, s)` query, laid out like `output` without `D`.
    pub lse: Vec<T>,
}

impl<T: Element> AttnResult<T> {
    /// "No keys seen": zero output, `lse = -∞`.
    pub fn identity(shape: Shape4) -> Self {
        Self {
            output: Tensor4::zeros(shape),
            lse: vec![T::neg_infinity(); shape.batch * shape.heads * shape.seq],
        }
    }

    pub fn lse_at(&self, b: usize, h: usize, s: usize) -> T {
        let sh = self.output.shape;
        self.lse[(b * sh.heads + h) * sh.seq + s]
    }

    pub fn slice_seq(&self, range: Range<usize>) -> Result<Self> {
        let output = self.output.slice_seq(range.clone())?;
        let sh = self.output.shape;
        let mut lse = Vec::with_capacity(sh.batch * sh.heads * range.len());
        for bh in 0..sh.batch * sh.heads {
            lse.extend_from_slice(&self.lse[bh * sh.seq + range.start..bh * sh.seq + range.end]);
        }
        Ok(Self { output, lse })
    }
}

fn check_qkv<T: Element>(q: &Tensor4<T>, k: &Tensor4<T>, v: &Tensor4<T>) -> Result<()> {
    let (qs, ks, vs) = (q.shape, k.shape, v.shape);
    qs.expect_same(&ks, &[Axis::Batch, Axis::Head, Axis::Dim])?;
    ks.expect_same(&vs, &[Axis::Batch, Axis::Head, Axis::Seq, Axis::Dim])?;
    Ok(())
}

/// Scaled logits of one query row against every key, plus their maximum.
fn scaled_logits<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    b: usize,
    h: usize,
    s: usize,
    scale: T,
    out: &mut Vec<T>,
) -> T {
    out.clear();
    let qrow = q.row(b, h, s);
    let mut max = T::neg_infinity();
    for j in 0..k.shape.seq {
        let dot = qrow
            .iter()
            .zip(k.row(b, h, j))
            .fold(T::zero(), |acc, (&a, &c)| acc + a * c);
        let z = dot * scale;
        if z > max {
            max = z;
        }
        out.push(z);
    }
    max
}

fn inv_sqrt_dim<T: Element>(dim: usize) -> T {
    T::from(dim).expect("dim fits").sqrt().recip()
}

/// Row softmax of `QKᵀ/√D`, returned as a `[B, H, Sq, Skv]` tensor.
pub fn attention_weights<T: Element>(q: &Tensor4<T>, k: &Tensor4<T>) -> Result<Tensor4<T>> {
    q.shape.expect_same(&k.shape, &[Axis::Batch, Axis::Head, Axis::Dim])?;
    let scale = inv_sqrt_dim::<T>(q.shape.dim);
    let shape = Shape4::new(q.shape.batch, q.shape.heads, q.shape.seq, k.shape.seq);
    let mut weights = Tensor4::zeros(shape);
    let mut logits = Vec::with_capacity(k.shape.seq);
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            for s in 0..shape.seq {
                let max = scaled_logits(q, k, b, h, s, scale, &mut logits);
                let row = weights.row_mut(b, h, s);
                let mut sum = T::zero();
                for (w, &z) in row.iter_mut().zip(&logits) {
                    *w = (z - max).exp();
                    sum = sum + *w;
                }
                for w in row.iter_mut() {
                    *w = *w / sum;
                }
            }
        }
    }
    Ok(weights)
}

/// `softmax(QKᵀ/√D)·V`, non-causal, with a max-subtracted row softmax.
pub fn attention_reference<T: Element>(q: &Tensor4<T>, k: &Tensor4<T>, v: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_qkv(q, k, v)?;
    let weights = attention_weights(q, k)?;
    let mut out = Tensor4::zeros(q.shape);
    for b in 0..q.shape.batch {
        for h in 0..q.shape.heads {
            for s in 0..q.shape.seq {
                let w = weights.row(b, h, s);
                let orow = out.row_mut(b, h, s);
                for (j, &wj) in w.iter().enumerate() {
                    for (o, &x) in orow.iter_mut().zip(v.row(b, h, j)) {
                        *o = *o + wj * x;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Attention restricted to the given keys, with the per-query log-sum-exp.
///
/// An empty key chunk yields [`AttnResult::identity`].
pub fn attention_with_lse<T: Element>(q: &Tensor4<T>, k: &Tensor4<T>, v: &Tensor4<T>) -> Result<AttnResult<T>> {
    check_qkv(q, k, v)?;
    let mut result = AttnResult::identity(q.shape);
    if k.shape.seq == 0 {
        return Ok(result);
    }
    let scale = inv_sqrt_dim::<T>(q.shape.dim);
    let mut logits = Vec::with_capacity(k.shape.seq);
    let mut acc = vec![T::zero(); q.shape.dim];
    let mut lse_idx = 0;
    for b in 0..q.shape.batch {
        for h in 0..q.shape.heads {
            for s in 0..q.shape.seq {
                let max = scaled_logits(q, k, b, h, s, scale, &mut logits);
                acc.iter_mut().for_each(|a| *a = T::zero());
                let mut sum = T::zero();
                for (j, &z) in logits.iter().enumerate() {
                    let p = (z - max).exp();
                    sum = sum + p;
                    for (a, &x) in acc.iter_mut().zip(v.row(b, h, j)) {
                        *a = *a + p * x;
                    }
                }
                for (o, &a) in result.output.row_mut(b, h, s).iter_mut().zip(&acc) {
                    *o = a / sum;
                }
                result.lse[lse_idx] = max + sum.ln();
                lse_idx += 1;
            }
        }
    }
    Ok(result)
}

/// Combine two partial attention results over disjoint key sets.
///
/// With `m = max(lse₁, lse₂)` and `aᵢ = e^{lseᵢ − m}`:
/// `lse = m + ln(a₁ + a₂)` and `O = (a₁·O₁ + a₂·O₂)/(a₁ + a₂)`, which equals
/// `e^{lse₁−lse}·O₁ + e^{lse₂−lse}·O₂` without overflow. A side with
/// `lse = -∞` contributes nothing and the other side is copied verbatim.
pub fn merge_lse<T: Element>(a: &AttnResult<T>, b: &AttnResult<T>) -> Result<AttnResult<T>> {
    let shape = a.output.shape;
    shape.expect_same(&b.output.shape, &[Axis::Batch, Axis::Head, Axis::Seq, Axis::Dim])?;
    let mut out = AttnResult::identity(shape);
    let dim = shape.dim;
    for (row, ((&l1, &l2), lse)) in a.lse.iter().zip(&b.lse).zip(out.lse.iter_mut()).enumerate() {
        let span = row * dim..(row + 1) * dim;
        let (o1, o2) = (&a.output.data[span.clone()], &b.output.data[span.clone()]);
        let dst = &mut out.output.data[span];
        if l2 == T::neg_infinity() {
            dst.copy_from_slice(o1);
            *lse = l1;
        } else if l1 == T::neg_infinity() {
            dst.copy_from_slice(o2);
            *lse = l2;
        } else {
            let m = if l1 > l2 { l1 } else { l2 };
            let (a1, a2) = ((l1 - m).exp(), (l2 - m).exp());
            let total = a1 + a2;
            *lse = m + total.ln();
            for ((d, &x1), &x2) in dst.iter_mut().zip(o1).zip(o2) {
                *d = (a1 * x1 + a2 * x2) / total;
            }
        }
    }
    Ok(out)
}
