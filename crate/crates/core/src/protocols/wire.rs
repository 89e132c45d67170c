//! Byte encoding of tensor segments inside protocol messages.
//!
//! A full-precision segment is the tensor's `f32` little-endian bytes. An FP8
//! segment is the `f32` scale followed by one code per element. Shapes are
//! never sent: both sides derive them from the collective's arguments.

use crate::error::{Error, Result};
use crate::fp8::{dequantize, quantize, quantize_with_scale, QuantizedTensor};
use crate::tensor::{Shape4, Tensor4};

pub(crate) fn segment_len(shape: Shape4, fp8: bool) -> usize {
    if fp8 {
        QuantizedTensor::payload_len(shape.volume())
    } else {
        4 * shape.volume()
    }
}

pub(crate) fn put_f32(out: &mut Vec<u8>, t: &Tensor4<f32>) {
    out.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
}

/// Appends `t`, quantized with its own scale when `fp8` is set.
pub(crate) fn put(out: &mut Vec<u8>, t: &Tensor4<f32>, fp8: bool) -> Result<()> {
    if fp8 {
        quantize(t)?.write_payload(out);
    } else {
        put_f32(out, t);
    }
    Ok(())
}

/// Appends `t` quantized with a scale chosen for a larger tensor.
pub(crate) fn put_scaled(out: &mut Vec<u8>, t: &Tensor4<f32>, scale: f32) {
    quantize_with_scale(t, scale).write_payload(out);
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Wire(format!(
                "message too short: need {end} bytes, have {}",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn tensor(&mut self, shape: Shape4, fp8: bool) -> Result<Tensor4<f32>> {
        let raw = self.take(segment_len(shape, fp8))?;
        if fp8 {
            Ok(dequantize(&QuantizedTensor::read_payload(shape, raw)?))
        } else {
            Tensor4::from_le_bytes(shape, raw)
        }
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Wire(format!(
                "{} trailing bytes after {}",
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}
