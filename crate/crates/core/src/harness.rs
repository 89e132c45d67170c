//! Runs a USP configuration end to end on the fabric and checks it against
//! the single-worker oracle and the closed-form traffic.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::costmodel::{comm_volume_ring, comm_volume_ulysses, round_counts, AttnDims};
use crate::error::Result;
use crate::fabric::{run_protocol, FabricConfig, OpKind, TrafficLog};
use crate::fp8::{decode_e4m3, encode_e4m3, FP8_MAX};
use crate::mesh::{feasible_meshes, Mesh2D};
use crate::protocols::{gather_in_order, split_sequence, usp_attention, CommOptions, Timeline};
use crate::rng::qkv;
use crate::tensor::{attention_reference, Shape4, Tensor4};

/// Inputs are drawn uniformly from this interval.
pub const INPUT_RANGE: (f64, f64) = (-3.0, 3.0);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UspCase {
    pub mesh: Mesh2D,
    /// Global `[B, H, S, D]`.
    pub shape: Shape4,
    pub seed: u64,
    pub opts: CommOptions,
    #[serde(skip)]
    pub fabric: FabricConfig,
}

impl UspCase {
    pub fn new(mesh: Mesh2D, shape: Shape4, seed: u64) -> Self {
        Self {
            mesh,
            shape,
            seed,
            opts: CommOptions::default(),
            fabric: FabricConfig::default(),
        }
    }

    pub fn with_opts(mut self, opts: CommOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn with_fabric(mut self, fabric: FabricConfig) -> Self {
        self.fabric = fabric;
        self
    }

    pub fn inputs(&self) -> [Tensor4<f32>; 3] {
        qkv(self.seed, self.shape, INPUT_RANGE.0, INPUT_RANGE.1)
    }
}

#[derive(Debug, Clone)]
pub struct UspRun {
    pub output: Tensor4<f32>,
    /// Max abs difference from the f64 oracle on the same inputs.
    pub max_abs_diff: f64,
    pub traffic: TrafficLog,
    /// Ring schedule per rank.
    pub timelines: Vec<Timeline>,
}

/// Single-worker attention in f64 on the case's inputs.
pub fn oracle(case: &UspCase) -> Result<Tensor4<f64>> {
    let [q, k, v] = case.inputs();
    attention_reference(&q.cast::<f64>(), &k.cast::<f64>(), &v.cast::<f64>())
}

pub fn run_usp(case: &UspCase) -> Result<UspRun> {
    let n = case.mesh.workers();
    case.mesh.validate_problem(case.shape.heads, case.shape.seq)?;
    let [q, k, v] = case.inputs();
    let (qs, ks, vs) = (split_sequence(&q, n)?, split_sequence(&k, n)?, split_sequence(&v, n)?);
    let mesh = case.mesh;
    let opts = case.opts;
    let out = run_protocol(n, &case.fabric, |w| {
        let r = w.rank();
        let (q, k, v) = (&qs[r], &ks[r], &vs[r]);
        async move { usp_attention(&w, q, k, v, &mesh, opts).await }
    })?;
    let mut parts = Vec::with_capacity(n);
    let mut timelines = Vec::with_capacity(n);
    for r in out.results {
        parts.push(r.output);
        timelines.push(r.timeline);
    }
    let output = gather_in_order(parts)?;
    let max_abs_diff = output.max_abs_diff(&oracle(case)?)?;
    Ok(UspRun {
        output,
        max_abs_diff,
        traffic: out.traffic,
        timelines,
    })
}

/// Observed and closed-form traffic of one rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankTraffic {
    pub rank: usize,
    pub all_to_all_bytes: u64,
    pub expected_all_to_all_bytes: u64,
    pub send_bytes: u64,
    pub expected_send_bytes: u64,
    pub all_to_all_rounds: usize,
    pub expected_all_to_all_rounds: usize,
    pub send_rounds: usize,
    pub expected_send_rounds: usize,
}

impl RankTraffic {
    pub fn exact(&self) -> bool {
        self.all_to_all_bytes == self.expected_all_to_all_bytes
            && self.send_bytes == self.expected_send_bytes
            && self.all_to_all_rounds == self.expected_all_to_all_rounds
            && self.send_rounds == self.expected_send_rounds
    }
}

/// Compares each rank's logged traffic with the closed forms, using 4-byte
/// elements as the simulator does.
pub fn check_traffic(case: &UspCase, traffic: &TrafficLog) -> Vec<RankTraffic> {
    let dims = AttnDims::from(case.shape);
    let fp8 = case.opts.fp8_kv;
    let (a2a, hops) = round_counts(&case.mesh);
    (0..case.mesh.workers())
        .map(|rank| RankTraffic {
            rank,
            all_to_all_bytes: traffic.bytes_sent_by_op(rank, OpKind::AllToAll),
            expected_all_to_all_bytes: comm_volume_ulysses(&dims, &case.mesh, 4, fp8),
            send_bytes: traffic.bytes_sent_by_op(rank, OpKind::Send),
            expected_send_bytes: comm_volume_ring(&dims, &case.mesh, 4, fp8),
            all_to_all_rounds: traffic.collective_count(rank, OpKind::AllToAll),
            expected_all_to_all_rounds: a2a,
            send_rounds: traffic.collective_count(rank, OpKind::Send),
            expected_send_rounds: hops,
        })
        .collect()
}

/// Every feasible mesh over N ∈ {1, 2, 4, 8}, H ∈ {4, 8}, S ∈ {16, 32},
/// D ∈ {4, 8}, for each seed.
pub fn verification_grid(seeds: &[u64]) -> Vec<UspCase> {
    let mut cases = Vec::new();
    for n in [1, 2, 4, 8] {
        for h in [4, 8] {
            for s in [16, 32] {
                for d in [4, 8] {
                    for mesh in feasible_meshes(n, h) {
                        for &seed in seeds {
                            cases.push(UspCase::new(mesh, Shape4::new(1, h, s, d), seed));
                        }
                    }
                }
            }
        }
    }
    cases
}

/// Machine-readable record of one simulated run.
#[derive(Debug, Clone, Serialize)]
pub struct Trace<'a> {
    pub case: &'a UspCase,
    pub max_abs_diff: f64,
    pub timelines: &'a [Timeline],
    pub traffic_summary: Vec<RankTraffic>,
    pub traffic: &'a TrafficLog,
}

impl<'a> Trace<'a> {
    pub fn new(case: &'a UspCase, run: &'a UspRun) -> Self {
        Self {
            case,
            max_abs_diff: run.max_abs_diff,
            timelines: &run.timelines,
            traffic_summary: check_traffic(case, &run.traffic),
            traffic: &run.traffic,
        }
    }
}

/// Exhaustive and sampled E4M3 codec checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodecCheck {
    /// Non-NaN codes `b` with `encode(decode(b)) == b`.
    pub roundtrip_codes: usize,
    pub roundtrip_failures: Vec<u8>,
    pub max_finite: f32,
    pub sign_samples: usize,
    pub sign_failures: usize,
}

impl CodecCheck {
    pub fn pass(&self) -> bool {
        self.roundtrip_failures.is_empty() && self.max_finite == FP8_MAX && self.sign_failures == 0
    }
}

/// Every byte code plus `samples` random bit patterns for sign symmetry.
pub fn codec_check(seed: u64, samples: usize) -> CodecCheck {
    let mut roundtrip_codes = 0;
    let mut roundtrip_failures = Vec::new();
    let mut max_finite = 0.0f32;
    for code in 0..=255u8 {
        let x = decode_e4m3(code);
        if x.is_nan() {
            continue;
        }
        max_finite = max_finite.max(x);
        if encode_e4m3(x) == code {
            roundtrip_codes += 1;
        } else {
            roundtrip_failures.push(code);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sign_samples = 0;
    let mut sign_failures = 0;
    while sign_samples < samples {
        let x = f32::from_bits(rng.next_u32());
        if !x.is_finite() {
            continue;
        }
        sign_samples += 1;
        if encode_e4m3(-x) != encode_e4m3(x) ^ 0x80 {
            sign_failures += 1;
        }
    }
    CodecCheck {
        roundtrip_codes,
        roundtrip_failures,
        max_finite,
        sign_samples,
        sign_failures,
    }
}
