//! Analytical latency and traffic model.
//!
//! Communication volumes are closed forms of what the protocols put on the
//! fabric, so they can be checked byte-for-byte against a simulated
//! [`TrafficLog`](crate::fabric::TrafficLog). Times are assembled from
//! bandwidth, per-message latency, kernel launch overhead and an ideally
//! divided compute budget.

pub mod calibrate;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{Mesh2D, MeshError};
use crate::protocols::{Event, Timeline};

pub use report::{breakdown_csv, CostRow, CSV_HEADER};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("{field} must be strictly positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },

    #[error("{field} must lie in [0, 1], got {value}")]
    OutOfUnit { field: &'static str, value: f64 },

    #[error(transparent)]
    Mesh(#[from] MeshError),
}

fn positive(field: &'static str, value: f64) -> Result<(), CostError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(CostError::NonPositive { field, value })
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    #[serde(default)]
    pub name: String,
    /// Quoted link bandwidth in bytes/s.
    pub link_bandwidth: f64,
    /// When set, `link_bandwidth` is the sum of both directions and one
    /// transfer sees half of it.
    #[serde(default = "default_true")]
    pub bidirectional: bool,
    /// Seconds added per message or collective round.
    pub link_latency: f64,
    /// Seconds of host time per kernel launch.
    pub launch_overhead: f64,
    /// Bytes per activation element (2 for bf16).
    pub element_width: usize,
    /// Attention FLOP/s, used to size one ring block's compute.
    pub attention_throughput: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<(), CostError> {
        positive("link_bandwidth", self.link_bandwidth)?;
        positive("link_latency", self.link_latency)?;
        positive("launch_overhead", self.launch_overhead)?;
        positive("element_width", self.element_width as f64)?;
        positive("attention_throughput", self.attention_throughput)
    }

    /// Bandwidth one directional transfer sees.
    pub fn direction_bandwidth(&self) -> f64 {
        if self.bidirectional {
            self.link_bandwidth / 2.0
        } else {
            self.link_bandwidth
        }
    }

    pub fn transfer_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.direction_bandwidth()
    }
}

/// Global attention problem size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnDims {
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn new(batch: usize, heads: usize, seq_len: usize, head_dim: usize) -> Self {
        Self {
            batch,
            heads,
            seq_len,
            head_dim,
        }
    }

    fn check(&self, mesh: &Mesh2D) -> Result<(), CostError> {
        for (field, v) in [
            ("batch", self.batch),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("head_dim", self.head_dim),
        ] {
            positive(field, v as f64)?;
        }
        mesh.validate_problem(self.heads, self.seq_len)?;
        Ok(())
    }
}

impl From<crate::tensor::Shape4> for AttnDims {
    fn from(s: crate::tensor::Shape4) -> Self {
        Self::new(s.batch, s.heads, s.seq, s.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    #[serde(default)]
    pub name: String,
    #[serde(flatten)]
    pub dims: AttnDims,
    /// Attention layers per denoising step.
    pub layers: usize,
    pub kernels_per_step: f64,
    /// Single-worker compute seconds per step; divided by N under the model.
    pub compute_per_step: f64,
    pub steps: usize,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<(), CostError> {
        positive("layers", self.layers as f64)?;
        positive("kernels_per_step", self.kernels_per_step)?;
        positive("compute_per_step", self.compute_per_step)?;
        positive("steps", self.steps as f64)
    }
}

fn default_residual() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    #[serde(default)]
    pub fp8_kv: bool,
    #[serde(default)]
    pub pipelined_ring: bool,
    /// Graph capture replaces per-kernel launches.
    #[serde(default)]
    pub compiled: bool,
    /// Share of launch cost left after graph capture.
    #[serde(default = "default_residual")]
    pub residual_factor: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            fp8_kv: false,
            pipelined_ring: false,
            compiled: false,
            residual_factor: default_residual(),
        }
    }
}

/// Bytes one K or V segment occupies on the wire.
fn kv_segment(elements: u64, width: u64, fp8: bool) -> u64 {
    if fp8 {
        elements + 4
    } else {
        elements * width
    }
}

/// Bytes each rank sends in the two Ulysses all-to-alls of one attention
/// layer, excluding the block it keeps for itself.
///
/// Per destination: a Q block and two K/V blocks going in, one output block
/// coming back. Under `fp8` the K/V blocks are one byte per element plus a
/// 4-byte scale each.
pub fn comm_volume_ulysses(dims: &AttnDims, mesh: &Mesh2D, width: usize, fp8: bool) -> u64 {
    let u = mesh.ulysses_size() as u64;
    if u == 1 {
        return 0;
    }
    let w = width as u64;
    let local = (dims.batch * dims.heads * (dims.seq_len / mesh.workers()) * dims.head_dim) as u64;
    let block = local / u;
    let per_dest = block * w + 2 * kv_segment(block, w, fp8) + block * w;
    per_dest * (u - 1)
}

/// Bytes each rank sends around its ring in one attention layer: a K and a V
/// chunk of `[B, H/U, S/R, D]` on each of the `R - 1` hops.
pub fn comm_volume_ring(dims: &AttnDims, mesh: &Mesh2D, width: usize, fp8: bool) -> u64 {
    let r = mesh.ring_size() as u64;
    (r - 1) * 2 * kv_segment(ring_chunk_elements(dims, mesh), width as u64, fp8)
}

fn ring_chunk_elements(dims: &AttnDims, mesh: &Mesh2D) -> u64 {
    (dims.batch * (dims.heads / mesh.ulysses_size()) * (dims.seq_len / mesh.ring_size()) * dims.head_dim) as u64
}

/// Collective rounds per attention layer: (Ulysses all-to-alls, ring hops).
pub fn round_counts(mesh: &Mesh2D) -> (usize, usize) {
    let a2a = if mesh.ulysses_size() > 1 { 2 } else { 0 };
    (a2a, mesh.ring_size() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineTimes {
    pub serial_total: f64,
    pub pipelined_total: f64,
    pub hidden_fraction: f64,
}

/// Ring schedule lengths for per-block compute `p` and per-hop transfer `c`.
///
/// The serial schedule alternates blocks and transfers. The pipelined one
/// prefetches the first transfer under the local block and overlaps every
/// later transfer with the previous block, so each of the `R - 1` remote
/// steps costs the slower of the two.
pub fn pipeline_timeline(compute: f64, comm: f64, ring: usize) -> PipelineTimes {
    let r = ring.max(1) as f64;
    let serial_total = r * compute + (r - 1.0) * comm;
    let pipelined_total = compute + (r - 1.0) * compute.max(comm);
    let hidden_fraction = if comm > 0.0 && ring > 1 {
        // each of the R−1 transfers overlaps one compute block
        compute.min(comm) / comm
    } else {
        1.0
    };
    PipelineTimes {
        serial_total,
        pipelined_total,
        hidden_fraction: hidden_fraction.clamp(0.0, 1.0),
    }
}

/// Replays a recorded ring [`Timeline`] with one compute stream and one
/// outgoing link per rank and returns its length.
///
/// Every rank runs the same schedule, so the chunk a rank waits for was sent
/// by its neighbour at the same local time the rank issued its own send.
pub fn price_timeline(timeline: &Timeline, compute: f64, comm: f64) -> f64 {
    let mut now = 0.0f64;
    let mut link_free = 0.0f64;
    let mut arrival = std::collections::BTreeMap::new();
    for e in &timeline.events {
        match *e {
            Event::SendIssued { transfer } => {
                let start = now.max(link_free);
                link_free = start + comm;
                arrival.insert(transfer, link_free);
            }
            Event::RecvIssued { .. } | Event::Merge { .. } => {}
            Event::Synced { transfer } => {
                now = now.max(arrival.get(&transfer).copied().unwrap_or(now));
            }
            Event::Compute { .. } => now += compute,
        }
    }
    now
}

/// Per-step latency split. `hidden_comm` overlaps compute and is not part of
/// `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub compute: f64,
    pub exposed_comm: f64,
    pub hidden_comm: f64,
    pub launch: f64,
    pub total: f64,
    pub steps: usize,
}

impl LatencyBreakdown {
    fn assemble(compute: f64, exposed_comm: f64, hidden_comm: f64, launch: f64, steps: usize) -> Self {
        Self {
            compute,
            exposed_comm,
            hidden_comm,
            launch,
            total: compute + exposed_comm + launch,
            steps,
        }
    }

    pub fn total_comm(&self) -> f64 {
        self.exposed_comm + self.hidden_comm
    }

    /// Exposed communication as a share of the step.
    pub fn comm_fraction(&self) -> f64 {
        self.exposed_comm / self.total
    }

    /// The same split for a whole run of `steps` steps.
    pub fn per_run(&self) -> Self {
        let k = self.steps as f64;
        Self::assemble(
            self.compute * k,
            self.exposed_comm * k,
            self.hidden_comm * k,
            self.launch * k,
            1,
        )
    }
}

/// Ring timing for one layer: (per-block compute, per-hop transfer).
pub fn ring_round_times(hw: &HardwareProfile, dims: &AttnDims, mesh: &Mesh2D, fp8: bool) -> (f64, f64) {
    let chunk = ring_chunk_elements(dims, mesh);
    let seq = (dims.seq_len / mesh.ring_size()) as f64;
    let flops = 4.0 * (dims.batch * (dims.heads / mesh.ulysses_size())) as f64 * seq * seq * dims.head_dim as f64;
    let hop = 2 * kv_segment(chunk, hw.element_width as u64, fp8);
    (flops / hw.attention_throughput, hw.transfer_time(hop) + hw.link_latency)
}

pub fn step_latency(
    hw: &HardwareProfile,
    w: &WorkloadProfile,
    mesh: &Mesh2D,
    opts: &ModelOptions,
) -> Result<LatencyBreakdown, CostError> {
    hw.validate()?;
    w.validate()?;
    w.dims.check(mesh)?;
    if !(0.0..=1.0).contains(&opts.residual_factor) {
        return Err(CostError::OutOfUnit {
            field: "residual_factor",
            value: opts.residual_factor,
        });
    }
    let n = mesh.workers() as f64;
    let compute = w.compute_per_step / n;

    let full_launch = w.kernels_per_step * hw.launch_overhead;
    let launch = if opts.compiled {
        full_launch * opts.residual_factor
    } else {
        full_launch
    };

    let (a2a_rounds, _) = round_counts(mesh);
    let ulysses = hw.transfer_time(comm_volume_ulysses(&w.dims, mesh, hw.element_width, opts.fp8_kv))
        + a2a_rounds as f64 * hw.link_latency;

    let r = mesh.ring_size();
    let (p, c) = ring_round_times(hw, &w.dims, mesh, opts.fp8_kv);
    let ring_comm = (r - 1) as f64 * c;
    let ring_exposed = if opts.pipelined_ring {
        let t = pipeline_timeline(p, c, r);
        t.pipelined_total - r as f64 * p
    } else {
        ring_comm
    };

    let layers = w.layers as f64;
    let exposed = layers * (ulysses + ring_exposed);
    let hidden = layers * (ring_comm - ring_exposed);
    Ok(LatencyBreakdown::assemble(compute, exposed, hidden, launch, w.steps))
}

/// Baseline over optimized, with the total delta attributed to components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub ratio: f64,
    pub total_delta: f64,
    pub compute_delta: f64,
    pub exposed_comm_delta: f64,
    pub launch_delta: f64,
}

impl SpeedupReport {
    pub fn attribution_sum(&self) -> f64 {
        self.compute_delta + self.exposed_comm_delta + self.launch_delta
    }
}

pub fn speedup_report(baseline: &LatencyBreakdown, optimized: &LatencyBreakdown) -> SpeedupReport {
    let report = SpeedupReport {
        ratio: baseline.total / optimized.total,
        total_delta: baseline.total - optimized.total,
        compute_delta: baseline.compute - optimized.compute,
        exposed_comm_delta: baseline.exposed_comm - optimized.exposed_comm,
        launch_delta: baseline.launch - optimized.launch,
    };
    let scale = baseline.total.abs().max(optimized.total.abs()).max(f64::MIN_POSITIVE);
    debug_assert!((report.attribution_sum() - report.total_delta).abs() <= 1e-12 * scale);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn pipeline_examples() {
        let t = pipeline_timeline(2.0, 1.0, 4);
        assert_eq!((t.serial_total, t.pipelined_total, t.hidden_fraction), (11.0, 8.0, 1.0));
        let t = pipeline_timeline(2.0, 3.0, 4);
        assert_eq!((t.serial_total, t.pipelined_total), (17.0, 11.0));
        assert!(close(t.hidden_fraction, 2.0 / 3.0));
        let t = pipeline_timeline(2.0, 0.0, 4);
        assert_eq!((t.serial_total, t.pipelined_total, t.hidden_fraction), (8.0, 8.0, 1.0));
        let t = pipeline_timeline(2.0, 5.0, 1);
        assert_eq!((t.serial_total, t.pipelined_total), (2.0, 2.0));
    }

    #[test]
    fn volume_examples() {
        let dims = AttnDims::new(1, 2, 8, 4);
        let u2 = build_mesh(2, 1, 2).unwrap();
        assert_eq!(comm_volume_ulysses(&dims, &u2, 2, false), 128);
        let r2 = build_mesh(2, 2, 2).unwrap();
        assert_eq!(comm_volume_ring(&dims, &r2, 2, false), 128);
        let one = build_mesh(1, 1, 2).unwrap();
        assert_eq!(comm_volume_ulysses(&dims, &one, 2, false), 0);
        assert_eq!(comm_volume_ring(&dims, &one, 2, false), 0);
    }

    #[test]
    fn ulysses_volume_matches_packed_closed_form() {
        let dims = AttnDims::new(2, 8, 64, 4);
        for u in [2usize, 4, 8] {
            let mesh = build_mesh(u, 1, 8).unwrap();
            let expect = 4 * 2 * 8 * (64 / u) * 4 * 2 * (u - 1) / u;
            assert_eq!(comm_volume_ulysses(&dims, &mesh, 2, false), expect as u64);
        }
    }

    #[test]
    fn fp8_shrinks_kv_only() {
        let dims = AttnDims::new(1, 4, 16, 8);
        let mesh = build_mesh(2, 2, 4).unwrap();
        let chunk = 4 * 8 * 8;
        assert_eq!(comm_volume_ring(&dims, &mesh, 2, true), 2 * (chunk + 4));
        let u = build_mesh(2, 1, 4).unwrap();
        let block = 4 * 8 * 8 / 2;
        assert_eq!(
            comm_volume_ulysses(&dims, &u, 2, true),
            (2 * block * 2 + 2 * (block + 4)) as u64
        );
    }

    #[test]
    fn priced_timeline_matches_closed_form() {
        for (p, c) in [(2.0, 1.0), (2.0, 3.0), (1.0, 1.0)] {
            for r in 1..6 {
                let t = pipeline_timeline(p, c, r);
                assert!(close(price_timeline(&synthetic(r, true), p, c), t.pipelined_total));
                assert!(close(price_timeline(&synthetic(r, false), p, c), t.serial_total));
            }
        }
    }

    fn synthetic(r: usize, pipelined: bool) -> Timeline {
        let mut events = Vec::new();
        if pipelined {
            if r > 1 {
                events.push(Event::RecvIssued { transfer: 1 });
                events.push(Event::SendIssued { transfer: 1 });
            }
            events.push(Event::Compute { block: 0 });
            for i in 1..r {
                events.push(Event::Synced { transfer: i });
                if i + 1 < r {
                    events.push(Event::RecvIssued { transfer: i + 1 });
                    events.push(Event::SendIssued { transfer: i + 1 });
                }
                events.push(Event::Compute { block: i });
                events.push(Event::Merge { block: i });
            }
        } else {
            events.push(Event::Compute { block: 0 });
            for i in 1..r {
                events.push(Event::SendIssued { transfer: i });
                events.push(Event::RecvIssued { transfer: i });
                events.push(Event::Synced { transfer: i });
                events.push(Event::Compute { block: i });
                events.push(Event::Merge { block: i });
            }
        }
        Timeline { events }
    }

    fn hw() -> HardwareProfile {
        HardwareProfile {
            name: "test".into(),
            link_bandwidth: 900e9,
            bidirectional: true,
            link_latency: 10e-6,
            launch_overhead: 7.5e-6,
            element_width: 2,
            attention_throughput: 300e12,
        }
    }

    fn workload() -> WorkloadProfile {
        WorkloadProfile {
            name: "test".into(),
            dims: AttnDims::new(1, 8, 1024, 64),
            layers: 4,
            kernels_per_step: 600.0,
            compute_per_step: 0.1,
            steps: 10,
        }
    }

    #[test]
    fn launch_term_for_one_worker() {
        let mesh = build_mesh(1, 1, 8).unwrap();
        let b = step_latency(&hw(), &workload(), &mesh, &ModelOptions::default()).unwrap();
        assert!(close(b.launch, 4.5e-3));
        assert_eq!(b.exposed_comm, 0.0);
        assert!(close(b.total, b.compute + b.exposed_comm + b.launch));
        let c = step_latency(
            &hw(),
            &workload(),
            &mesh,
            &ModelOptions {
                compiled: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(close(c.launch, 4.5e-3 * 0.05));
        let s = speedup_report(&b, &c);
        assert!(close(s.ratio, b.total / (b.total - (b.launch - c.launch))));
        assert!(close(s.attribution_sum(), s.total_delta));
    }

    #[test]
    fn identical_breakdowns_give_unit_speedup() {
        let mesh = build_mesh(2, 2, 8).unwrap();
        let b = step_latency(&hw(), &workload(), &mesh, &ModelOptions::default()).unwrap();
        let s = speedup_report(&b, &b);
        assert_eq!(s.ratio, 1.0);
        assert_eq!(s.total_delta, 0.0);
    }

    #[test]
    fn pipelining_hides_ring_comm() {
        let mesh = build_mesh(4, 4, 8).unwrap();
        let serial = step_latency(&hw(), &workload(), &mesh, &ModelOptions::default()).unwrap();
        let piped = step_latency(
            &hw(),
            &workload(),
            &mesh,
            &ModelOptions {
                pipelined_ring: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(piped.exposed_comm < serial.exposed_comm);
        assert!(close(piped.total_comm(), serial.total_comm()));
        assert_eq!(serial.hidden_comm, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mesh = build_mesh(2, 2, 8).unwrap();
        let mut h = hw();
        h.link_bandwidth = 0.0;
        assert!(matches!(
            step_latency(&h, &workload(), &mesh, &ModelOptions::default()),
            Err(CostError::NonPositive {
                field: "link_bandwidth",
                ..
            })
        ));
        let mut w = workload();
        w.dims.seq_len = 1023;
        assert!(matches!(
            step_latency(&hw(), &w, &mesh, &ModelOptions::default()),
            Err(CostError::Mesh(MeshError::Sequence { .. }))
        ));
    }

    #[test]
    fn per_run_scales_by_steps() {
        let mesh = build_mesh(2, 2, 8).unwrap();
        let b = step_latency(&hw(), &workload(), &mesh, &ModelOptions::default()).unwrap();
        let run = b.per_run();
        assert!(close(run.total, b.total * 10.0));
    }
}
