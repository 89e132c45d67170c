use std::path::Path;

use serde::Serialize;
use usp_core::costmodel::{
    breakdown_csv, speedup_report, step_latency, AttnDims, CostRow, HardwareProfile, LatencyBreakdown, ModelOptions,
    SpeedupReport, WorkloadProfile,
};
use usp_core::harness::{
    check_traffic, codec_check, run_usp, verification_grid, CodecCheck, RankTraffic, Trace, UspCase,
};
use usp_core::mesh::{build_mesh, feasible_meshes, Mesh2D};
use usp_core::protocols::CommOptions;
use usp_core::Shape4;

use crate::config::{Format, RunConfig};
use crate::CliError;

/// Oracle tolerance in 32-bit mode.
pub const ORACLE_TOLERANCE: f64 = 1e-5;

/// Sign-symmetry samples drawn by `verify`.
const CODEC_SAMPLES: usize = 10_000;

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn emit(cfg: &RunConfig, text: String) -> Result<(), CliError> {
    match &cfg.out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Internal(anyhow::anyhow!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(cfg: &RunConfig, body: T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(&Report { config: cfg, body }).map_err(|e| CliError::Internal(e.into()))?;
    text.push('\n');
    emit(cfg, text)
}

fn comm_options(cfg: &RunConfig) -> CommOptions {
    CommOptions {
        fp8_kv: cfg.fp8_kv,
        pipelined_ring: cfg.pipelined,
    }
}

/// The one case described by `--workers`, `--max-ring` and `--dims`.
fn single_case(cfg: &RunConfig, dims: Shape4, seed: u64) -> Result<UspCase, CliError> {
    let workers = cfg
        .workers
        .ok_or_else(|| CliError::Config("--workers is required together with --dims".into()))?;
    let mesh = build_mesh(workers, cfg.max_ring.unwrap_or(workers), dims.heads)?;
    mesh.validate_problem(dims.heads, dims.seq)?;
    Ok(UspCase::new(mesh, dims, seed).with_opts(comm_options(cfg)))
}

#[derive(Serialize)]
struct CaseResult {
    mesh: Mesh2D,
    dims: Shape4,
    seed: u64,
    max_abs_diff: f64,
    pipelined_matches_serial: bool,
    traffic_exact: bool,
    /// Output error of the fp8_kv run relative to the full-precision run.
    #[serde(skip_serializing_if = "Option::is_none")]
    fp8_relative_error: Option<f64>,
    pass: bool,
}

fn traffic_exact(case: &UspCase, traffic: &usp_core::TrafficLog) -> bool {
    check_traffic(case, traffic).iter().all(RankTraffic::exact) && traffic.is_conserved()
}

fn verify_case(case: &UspCase, fp8: bool) -> Result<CaseResult, CliError> {
    let full = |pipelined_ring| {
        case.clone().with_opts(CommOptions {
            fp8_kv: false,
            pipelined_ring,
        })
    };
    let (serial_case, pipelined_case) = (full(false), full(true));
    let serial = run_usp(&serial_case)?;
    let pipelined = run_usp(&pipelined_case)?;
    let bitwise = serial
        .output
        .data()
        .iter()
        .zip(pipelined.output.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let mut exact = traffic_exact(&serial_case, &serial.traffic) && traffic_exact(&pipelined_case, &pipelined.traffic);
    let fp8_relative_error = if fp8 {
        let q_case = case.clone().with_opts(CommOptions {
            fp8_kv: true,
            pipelined_ring: case.opts.pipelined_ring,
        });
        let q = run_usp(&q_case)?;
        exact &= traffic_exact(&q_case, &q.traffic);
        Some(q.output.relative_frobenius_error(&serial.output)?)
    } else {
        None
    };
    Ok(CaseResult {
        mesh: case.mesh,
        dims: case.shape,
        seed: case.seed,
        max_abs_diff: serial.max_abs_diff,
        pipelined_matches_serial: bitwise,
        traffic_exact: exact,
        fp8_relative_error,
        pass: serial.max_abs_diff <= ORACLE_TOLERANCE && pipelined.max_abs_diff <= ORACLE_TOLERANCE && bitwise && exact,
    })
}

#[derive(Serialize)]
struct VerifyBody {
    tolerance: f64,
    codec: CodecCheck,
    cases: Vec<CaseResult>,
    passed: usize,
    failed: usize,
    pass: bool,
}

/// Returns whether every check passed.
pub fn verify(cfg: &RunConfig) -> Result<bool, CliError> {
    let seed = cfg.require_seed()?;
    let cases = match cfg.dims {
        Some(dims) => vec![single_case(cfg, dims, seed)?],
        None => {
            let cases: Vec<UspCase> = verification_grid(&[seed])
                .into_iter()
                .filter(|c| cfg.workers.is_none_or(|n| c.mesh.workers() == n))
                .filter(|c| cfg.max_ring.is_none_or(|r| c.mesh.ring_size() <= r))
                .map(|c| c.with_opts(comm_options(cfg)))
                .collect();
            if cases.is_empty() {
                return Err(CliError::Config(
                    "no grid configuration matches --workers/--max-ring".into(),
                ));
            }
            cases
        }
    };
    let codec = codec_check(seed, CODEC_SAMPLES);
    let results = cases
        .iter()
        .map(|c| verify_case(c, cfg.fp8_kv))
        .collect::<Result<Vec<_>, _>>()?;
    let passed = results.iter().filter(|r| r.pass).count();
    let failed = results.len() - passed;
    let pass = failed == 0 && codec.pass();
    emit_json(
        cfg,
        VerifyBody {
            tolerance: ORACLE_TOLERANCE,
            codec,
            cases: results,
            passed,
            failed,
            pass,
        },
    )?;
    Ok(pass)
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let dims = cfg
        .dims
        .ok_or_else(|| CliError::Config("simulate needs --dims".into()))?;
    let case = single_case(cfg, dims, seed)?;
    let run = run_usp(&case)?;
    emit_json(
        cfg,
        SimulateBody {
            trace: Trace::new(&case, &run),
        },
    )
}

#[derive(Serialize)]
struct SimulateBody<'a> {
    trace: Trace<'a>,
}

fn load<T: serde::de::DeserializeOwned>(what: &str, path: Option<&Path>) -> Result<T, CliError> {
    let path = path.ok_or_else(|| CliError::Config(format!("cost needs a {what} profile (--{what})")))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {what} profile {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad {what} profile {}: {e}", path.display())))
}

#[derive(Serialize)]
struct CostEntry {
    label: String,
    mesh: Mesh2D,
    breakdown: LatencyBreakdown,
    per_run: LatencyBreakdown,
    comm_fraction: f64,
    /// Share of all communication overlapped with compute.
    hidden_fraction: f64,
    /// Against the same mesh with every option off.
    speedup: SpeedupReport,
}

#[derive(Serialize)]
struct CostBody<'a> {
    hardware: &'a HardwareProfile,
    workload: &'a WorkloadProfile,
    options: ModelOptions,
    rows: Vec<CostEntry>,
}

fn label(mesh: &Mesh2D, opts: &ModelOptions) -> String {
    let mut s = format!("N={} R={} U={}", mesh.workers(), mesh.ring_size(), mesh.ulysses_size());
    for (on, name) in [
        (opts.fp8_kv, "fp8_kv"),
        (opts.pipelined_ring, "pipelined"),
        (opts.compiled, "compiled"),
    ] {
        if on {
            s.push(' ');
            s.push_str(name);
        }
    }
    s
}

pub fn cost(cfg: &RunConfig) -> Result<(), CliError> {
    let hw: HardwareProfile = load("hw", cfg.hw.as_deref())?;
    let mut workload: WorkloadProfile = load("workload", cfg.workload.as_deref())?;
    hw.validate()?;
    workload.validate()?;
    if let Some(d) = cfg.dims {
        workload.dims = AttnDims::from(d);
    }
    let dims = workload.dims;
    let opts = ModelOptions {
        fp8_kv: cfg.fp8_kv,
        pipelined_ring: cfg.pipelined,
        compiled: cfg.compiled,
        ..ModelOptions::default()
    };
    let workers = cfg.workers.map_or_else(|| vec![1, 2, 4, 8], |n| vec![n]);
    let mut rows = Vec::new();
    for n in workers {
        for mesh in feasible_meshes(n, dims.heads) {
            if cfg.max_ring.is_some_and(|r| mesh.ring_size() > r) || !dims.seq_len.is_multiple_of(n) {
                continue;
            }
            let base = step_latency(&hw, &workload, &mesh, &ModelOptions::default())?;
            let b = step_latency(&hw, &workload, &mesh, &opts)?;
            rows.push(CostEntry {
                label: label(&mesh, &opts),
                mesh,
                breakdown: b,
                per_run: b.per_run(),
                comm_fraction: b.comm_fraction(),
                hidden_fraction: if b.total_comm() > 0.0 {
                    b.hidden_comm / b.total_comm()
                } else {
                    1.0
                },
                speedup: speedup_report(&base, &b),
            });
        }
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!(
            "no feasible mesh for {} heads and sequence length {} under the requested workers/max-ring",
            dims.heads, dims.seq_len
        )));
    }
    match cfg.format {
        Format::Json => emit_json(
            cfg,
            CostBody {
                hardware: &hw,
                workload: &workload,
                options: opts,
                rows,
            },
        ),
        Format::Csv => {
            let table: Vec<CostRow> = rows
                .iter()
                .map(|r| CostRow::new(r.label.clone(), &r.breakdown, Some(r.speedup.ratio)))
                .collect();
            emit(cfg, breakdown_csv(&table))
        }
    }
}
