//! FP8 E4M3 codec and per-tensor scaled quantization.
//!
//! Layout: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits. There are no
//! infinities; `S.1111.111` is NaN, which leaves 448 as the largest finite
//! magnitude. Subnormals go down to 2⁻⁹.
//!
//! Encoding rounds to nearest, ties to even, and saturates anything at or
//! above 448 in magnitude to ±448.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Largest finite E4M3 magnitude.
pub const FP8_MAX: f32 = 448.0;

/// Code of +448.
pub const MAX_FINITE_CODE: u8 = 0x7E;

/// Canonical positive NaN code.
pub const NAN_CODE: u8 = 0x7F;

const SIGN_BIT: u8 = 0x80;
const MIN_NORMAL: f32 = 0.015_625; // 2^-6

/// One E4M3 value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fp8E4M3(pub u8);

impl Fp8E4M3 {
    pub fn from_f32(x: f32) -> Self {
        Self(encode_e4m3(x))
    }

    pub fn to_f32(self) -> f32 {
        decode_e4m3(self.0)
    }

    pub fn is_nan(self) -> bool {
        self.0 & !SIGN_BIT == NAN_CODE
    }
}

pub fn encode_e4m3(x: f32) -> u8 {
    let bits = x.to_bits();
    let sign = ((bits >> 24) & 0x80) as u8;
    let mag = x.abs();
    if mag.is_nan() {
        return sign | NAN_CODE;
    }
    if mag >= FP8_MAX {
        return sign | MAX_FINITE_CODE;
    }
    if mag < MIN_NORMAL {
        // Subnormal grid has spacing 2^-9; scaling by 512 is exact.
        let steps = (mag * 512.0).round_ties_even() as u8;
        // steps == 8 is the smallest normal, whose code is also 8.
        return sign | steps;
    }
    // mag is a normal f32 with unbiased exponent in [-6, 8].
    let mag_bits = mag.to_bits();
    let exp = ((mag_bits >> 23) as i32) - 127;
    let mantissa = mag_bits & 0x7F_FFFF;
    let mut code = (((exp + 7) as u32) << 3) | (mantissa >> 20);
    let rest = mantissa & 0xF_FFFF;
    const HALF: u32 = 0x8_0000;
    if rest > HALF || (rest == HALF && code & 1 == 1) {
        // A mantissa carry rolls into the exponent field, which is the
        // correctly rounded next binade.
        code += 1;
    }
    sign | (code.min(u32::from(MAX_FINITE_CODE)) as u8)
}

pub fn decode_e4m3(code: u8) -> f32 {
    let sign = if code & SIGN_BIT != 0 { -1.0 } else { 1.0 };
    let exp = i32::from((code >> 3) & 0x0F);
    let mantissa = f32::from(code & 0x07);
    if exp == 0x0F && code & 0x07 == 0x07 {
        return f32::NAN;
    }
    if exp == 0 {
        return sign * mantissa * (1.0 / 512.0);
    }
    sign * (1.0 + mantissa / 8.0) * 2f32.powi(exp - 7)
}

/// A tensor quantized with a single scale: `x ≈ decode(code) · scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Shape4,
    pub codes: Vec<u8>,
    pub scale: f32,
}

/// Bytes in front of the codes in [`QuantizedTensor::to_wire`].
pub const WIRE_HEADER_LEN: usize = 16 + 4;

/// `scale = max|x| / 448` (1.0 for an all-zero tensor), codes = encode(x / scale).
pub fn quantize(x: &Tensor4<f32>) -> Result<QuantizedTensor> {
    let scale = scale_for(x)?;
    Ok(quantize_with_scale(x, scale))
}

/// The per-tensor scale [`quantize`] would use.
pub fn scale_for(x: &Tensor4<f32>) -> Result<f32> {
    x.ensure_finite()?;
    let max = x.max_abs();
    Ok(if max == 0.0 { 1.0 } else { max / FP8_MAX })
}

/// Encodes `x / scale` elementwise. Slices of a tensor quantized with the
/// whole tensor's scale carry the same codes as the corresponding slice of
/// `quantize(whole)`.
pub fn quantize_with_scale(x: &Tensor4<f32>, scale: f32) -> QuantizedTensor {
    let codes = x.data().iter().map(|&v| encode_e4m3(v / scale)).collect();
    QuantizedTensor {
        shape: x.shape(),
        codes,
        scale,
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor4<f32> {
    let data = q.codes.iter().map(|&c| decode_e4m3(c) * q.scale).collect();
    Tensor4::new(q.shape, data).expect("codes length matches shape")
}

impl QuantizedTensor {
    /// Scale followed by codes; the form carried inside collectives, where
    /// the receiver already knows the shape.
    pub fn payload_len(elements: usize) -> usize {
        4 + elements
    }

    pub fn write_payload(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.codes);
    }

    pub fn read_payload(shape: Shape4, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::payload_len(shape.volume()) {
            return Err(Error::Wire(format!(
                "fp8 payload for {shape} must be {} bytes, got {}",
                Self::payload_len(shape.volume()),
                bytes.len()
            )));
        }
        let scale = f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Wire(format!("invalid scale {scale}")));
        }
        Ok(Self {
            shape,
            codes: bytes[4..].to_vec(),
            scale,
        })
    }

    /// Self-describing little-endian layout: four `u32` shape fields
    /// (B, H, S, D), the `f32` scale, then one code byte per element.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(WIRE_HEADER_LEN + self.codes.len());
        for n in [self.shape.batch, self.shape.heads, self.shape.seq, self.shape.dim] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        self.write_payload(&mut out);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Wire(format!("header needs 16 bytes, got {}", bytes.len())));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let shape = Shape4::new(field(0), field(1), field(2), field(3));
        Self::read_payload(shape, &bytes[16..])
    }
}
