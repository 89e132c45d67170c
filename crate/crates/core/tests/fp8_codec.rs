use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use usp_core::fp8::{decode_e4m3, dequantize, encode_e4m3, quantize, FP8_MAX, MAX_FINITE_CODE};
use usp_core::{Shape4, Tensor4};

#[derive(Deserialize)]
struct Entry {
    code: u8,
    value: Option<f64>,
}

fn table() -> Vec<Entry> {
    serde_json::from_str(include_str!("fixtures/e4m3_decode.json")).unwrap()
}

#[test]
fn decode_matches_independent_table() {
    let t = table();
    assert_eq!(t.len(), 256);
    for e in t {
        let got = decode_e4m3(e.code);
        match e.value {
            None => assert!(got.is_nan(), "code {:#04x}", e.code),
            Some(v) => {
                assert_eq!(f64::from(got), v, "code {:#04x}", e.code);
                assert_eq!(got.is_sign_negative(), e.code & 0x80 != 0);
            }
        }
    }
}

#[test]
fn every_non_nan_code_roundtrips() {
    for code in 0..=255u8 {
        let x = decode_e4m3(code);
        if x.is_nan() {
            assert_eq!(code & 0x7F, 0x7F);
            continue;
        }
        assert_eq!(encode_e4m3(x), code, "code {code:#04x} value {x}");
    }
}

#[test]
fn largest_finite_is_448() {
    let max = (0..=255u8)
        .map(decode_e4m3)
        .filter(|x| x.is_finite())
        .fold(0.0f32, f32::max);
    assert_eq!(max, FP8_MAX);
    assert_eq!(decode_e4m3(MAX_FINITE_CODE), 448.0);
    assert_eq!(encode_e4m3(f32::INFINITY), MAX_FINITE_CODE);
    assert_eq!(encode_e4m3(f32::NEG_INFINITY), 0x80 | MAX_FINITE_CODE);
}

/// Encoding picks a nearest representable value, ties to an even code.
#[test]
fn encoding_is_nearest_with_even_ties() {
    let finite: Vec<(u8, f32)> = (0..=0x7Eu8).map(|c| (c, decode_e4m3(c))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = Normal::new(0.0f64, 1.0).unwrap();
    for i in 0..20_000 {
        let x = if i % 2 == 0 {
            (grid.sample(&mut rng) * 60.0).abs() as f32
        } else {
            (grid.sample(&mut rng) * 0.02).abs() as f32
        };
        if x >= FP8_MAX {
            continue;
        }
        let best = finite
            .iter()
            .map(|&(_, v)| (f64::from(v) - f64::from(x)).abs())
            .fold(f64::INFINITY, f64::min);
        let code = encode_e4m3(x);
        let err = (f64::from(decode_e4m3(code)) - f64::from(x)).abs();
        assert_eq!(err, best, "x = {x}");
        let ties: Vec<u8> = finite
            .iter()
            .filter(|&&(_, v)| (f64::from(v) - f64::from(x)).abs() == best)
            .map(|&(c, _)| c)
            .collect();
        if ties.len() == 2 {
            assert_eq!(code & 1, 0, "tie at {x} must go to the even code");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn sign_symmetry(x in any::<f32>()) {
        prop_assume!(!x.is_nan());
        prop_assert_eq!(encode_e4m3(-x), encode_e4m3(x) ^ 0x80);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn max_element_roundtrips_within_one_ulp(seed in any::<u64>()) {
        let mut rng = usp_core::rng::TensorRng::new(seed);
        let x: Tensor4<f32> = rng.tensor(Shape4::new(1, 2, 4, 8), -3.0, 3.0);
        let idx = x.data().iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        let q = quantize(&x).unwrap();
        let back = dequantize(&q).data()[idx];
        let orig = x.data()[idx];
        let ulp = f32::from_bits(orig.abs().to_bits() + 1) - orig.abs();
        prop_assert!((back - orig).abs() <= ulp, "{} -> {}", orig, back);
        if q.scale * FP8_MAX == orig.abs() {
            prop_assert_eq!(back, orig);
        }
    }

    #[test]
    fn elementwise_error_within_half_step(seed in any::<u64>()) {
        let mut rng = usp_core::rng::TensorRng::new(seed);
        let x: Tensor4<f32> = rng.tensor(Shape4::new(1, 1, 8, 8), -3.0, 3.0);
        let q = quantize(&x).unwrap();
        let y = dequantize(&q);
        for (a, b) in x.data().iter().zip(y.data()) {
            // relative spacing of E4M3 normals is 2^-3; half of it bounds rounding
            let bound = (a.abs() / 16.0).max(q.scale * 2f32.powi(-10)) * 1.0001;
            prop_assert!((a - b).abs() <= bound, "{} vs {}", a, b);
        }
    }
}

#[test]
fn gaussian_rms_error_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let shape = Shape4::new(4, 8, 64, 16);
    let data: Vec<f32> = (0..shape.volume()).map(|_| normal.sample(&mut rng) as f32).collect();
    let x = Tensor4::new(shape, data).unwrap();
    let rel = dequantize(&quantize(&x).unwrap()).relative_frobenius_error(&x).unwrap();
    eprintln!("gaussian relative RMS error {rel:.5}");
    assert!(rel <= 0.03, "relative RMS error {rel}");
}
