use std::path::PathBuf;

use proptest::prelude::*;
use usp_core::costmodel::calibrate::{flux_mesh, flux_workload, nvlink_profile};
use usp_core::costmodel::{
    comm_volume_ring, comm_volume_ulysses, pipeline_timeline, step_latency, AttnDims, HardwareProfile, ModelOptions,
    WorkloadProfile,
};
use usp_core::harness::{check_traffic, run_usp, UspCase};
use usp_core::mesh::feasible_meshes;
use usp_core::protocols::CommOptions;
use usp_core::Shape4;

fn profiles_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../profiles")
}

#[test]
fn shipped_profiles_match_calibration() {
    let hw: HardwareProfile =
        serde_json::from_str(&std::fs::read_to_string(profiles_dir().join("nvlink.json")).unwrap()).unwrap();
    let w: WorkloadProfile =
        serde_json::from_str(&std::fs::read_to_string(profiles_dir().join("flux.json")).unwrap()).unwrap();
    let (fit_hw, fit_w) = (nvlink_profile(), flux_workload(&nvlink_profile()));
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs();
    assert!(close(hw.link_latency, fit_hw.link_latency));
    assert!(close(hw.attention_throughput, fit_hw.attention_throughput));
    assert_eq!(
        (hw.link_bandwidth, hw.launch_overhead, hw.element_width),
        (900e9, 7.5e-6, 2)
    );
    assert!(close(w.kernels_per_step, fit_w.kernels_per_step));
    assert!(close(w.compute_per_step, fit_w.compute_per_step));
    assert_eq!((w.dims, w.layers, w.steps), (fit_w.dims, fit_w.layers, fit_w.steps));
}

#[test]
fn closed_forms_equal_simulated_traffic() {
    for n in [1, 2, 4, 8] {
        for mesh in feasible_meshes(n, 8) {
            for fp8_kv in [false, true] {
                let case = UspCase::new(mesh, Shape4::new(2, 8, 16, 4), 1).with_opts(CommOptions {
                    fp8_kv,
                    pipelined_ring: true,
                });
                let run = run_usp(&case).unwrap();
                for r in check_traffic(&case, &run.traffic) {
                    assert!(r.exact(), "{mesh} fp8={fp8_kv}: {r:?}");
                }
            }
        }
    }
}

#[test]
fn ulysses_volume_scales_inversely_with_workers() {
    let dims = AttnDims::new(1, 24, 4608, 128);
    let mut prev = None;
    for u in [2usize, 4, 8] {
        let mesh = feasible_meshes(u, 24).into_iter().find(|m| m.ring_size() == 1).unwrap();
        let v = comm_volume_ulysses(&dims, &mesh, 2, false) as f64;
        let bhsd = (24 * 4608 * 128 * 2) as f64;
        // 4·BHSD/U·(U−1)/U
        assert_eq!(v, 4.0 * bhsd / u as f64 * (u - 1) as f64 / u as f64);
        if let Some(p) = prev {
            assert!(v < p);
        }
        prev = Some(v);
    }
}

#[test]
fn pure_ulysses_cheaper_than_pure_ring_beyond_two() {
    let hw = nvlink_profile();
    let w = flux_workload(&hw);
    for n in [4, 8] {
        let meshes = feasible_meshes(n, 24);
        let ulysses = meshes.iter().find(|m| m.ring_size() == 1).unwrap();
        let ring = meshes.iter().find(|m| m.ulysses_size() == 1).unwrap();
        let f = |m| {
            step_latency(&hw, &w, m, &ModelOptions::default())
                .unwrap()
                .comm_fraction()
        };
        assert!(f(ulysses) <= f(ring), "N={n}");
    }
}

#[test]
fn flux_comm_fraction_by_worker_count() {
    let hw = nvlink_profile();
    let w = flux_workload(&hw);
    let frac = |n| {
        step_latency(&hw, &w, &flux_mesh(n).unwrap(), &ModelOptions::default())
            .unwrap()
            .comm_fraction()
    };
    // fraction grows with N as compute shrinks
    assert!(frac(2) < frac(4) && frac(4) < frac(8));
}

fn hw_with(bandwidth: f64) -> HardwareProfile {
    HardwareProfile {
        link_bandwidth: bandwidth,
        ..nvlink_profile()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pipelined_never_slower(p in 0.0f64..10.0, c in 0.0f64..10.0, r in 1usize..16) {
        let t = pipeline_timeline(p, c, r);
        prop_assert!(t.pipelined_total <= t.serial_total + 1e-12);
        prop_assert!((0.0..=1.0).contains(&t.hidden_fraction));
        if c <= p {
            prop_assert_eq!(t.hidden_fraction, 1.0);
        }
        if r > 1 && c > 0.0 && p > 0.0 {
            prop_assert!(t.pipelined_total < t.serial_total);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn latency_monotone(bw in 1e9f64..2e12, scale in 1.01f64..4.0, kernels in 1.0f64..1e4,
                        pipelined in any::<bool>(), fp8 in any::<bool>(), mesh_pick in 0usize..4) {
        let mesh = feasible_meshes(8, 24)[mesh_pick];
        let opts = ModelOptions { pipelined_ring: pipelined, fp8_kv: fp8, ..Default::default() };
        let mut w = flux_workload(&nvlink_profile());
        w.kernels_per_step = kernels;
        let slow = step_latency(&hw_with(bw), &w, &mesh, &opts).unwrap();
        let fast = step_latency(&hw_with(bw * scale), &w, &mesh, &opts).unwrap();
        prop_assert!(fast.total <= slow.total);
        if mesh.workers() > 1 {
            prop_assert!(fast.exposed_comm < slow.exposed_comm || slow.exposed_comm == 0.0);
        }
        let mut more = w.clone();
        more.kernels_per_step = kernels * scale;
        let heavier = step_latency(&hw_with(bw), &more, &mesh, &opts).unwrap();
        prop_assert!(heavier.total >= slow.total);
        prop_assert!((slow.total - (slow.compute + slow.exposed_comm + slow.launch)).abs() <= 1e-15);
        prop_assert!(slow.hidden_comm <= slow.total_comm());
    }
}

#[test]
fn ring_volume_fp8_accounting() {
    let dims = AttnDims::new(1, 2, 8, 4);
    let mesh = feasible_meshes(2, 2).into_iter().find(|m| m.ring_size() == 2).unwrap();
    assert_eq!(comm_volume_ring(&dims, &mesh, 2, false), 128);
    assert_eq!(comm_volume_ring(&dims, &mesh, 2, true), 2 * (32 + 4));
}
