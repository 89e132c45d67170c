//! Numerically exact simulation of Ulysses, Ring and USP distributed
//! attention, with an FP8 E4M3 codec, a deterministic message-passing fabric
//! and an analytical latency model.
//!
//! ```
//! use usp_core::{build_mesh, rng::qkv, Shape4};
//! use usp_core::harness::{run_usp, UspCase};
//!
//! let mesh = build_mesh(4, 2, 8).unwrap();
//! let case = UspCase::new(mesh, Shape4::new(1, 8, 16, 4), 7);
//! let run = run_usp(&case).unwrap();
//! assert!(run.max_abs_diff <= 1e-5);
//! ```

pub mod costmodel;
pub mod error;
pub mod fabric;
pub mod fp8;
pub mod harness;
pub mod mesh;
pub mod protocols;
pub mod rng;
pub mod tensor;

pub use error::{Axis, Error, Result};
pub use fabric::{
    run_protocol, FabricConfig, OpKind, ProcessGroup, Rank, RunOutput, Scheduler, TrafficLog, TrafficRecord, Worker,
};
pub use fp8::{decode_e4m3, dequantize, encode_e4m3, quantize, Fp8E4M3, QuantizedTensor};
pub use mesh::{build_mesh, Mesh2D, MeshError};
pub use protocols::{CommOptions, ShardSpec};
pub use tensor::{attention_reference, attention_with_lse, merge_lse, AttnResult, Element, Shape4, Tensor4};

/// Guide chapters, compiled so that their examples run as doc-tests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    pub mod intro {}
    #[doc = include_str!("../../../book/src/attention.md")]
    pub mod attention {}
    #[doc = include_str!("../../../book/src/fp8.md")]
    pub mod fp8 {}
    #[doc = include_str!("../../../book/src/fabric.md")]
    pub mod fabric {}
    #[doc = include_str!("../../../book/src/mesh.md")]
    pub mod mesh {}
    #[doc = include_str!("../../../book/src/protocols.md")]
    pub mod protocols {}
    #[doc = include_str!("../../../book/src/costmodel.md")]
    pub mod costmodel {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../README.md")]
    pub mod readme {}
}
