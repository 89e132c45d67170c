//! Regenerates `profiles/nvlink.json` and `profiles/flux.json` from the
//! calibration targets.

use std::path::PathBuf;

use usp_core::costmodel::calibrate::{flux_workload, nvlink_profile};

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../profiles");
    let hw = nvlink_profile();
    let w = flux_workload(&hw);
    std::fs::write(dir.join("nvlink.json"), serde_json::to_string_pretty(&hw)? + "\n")?;
    std::fs::write(dir.join("flux.json"), serde_json::to_string_pretty(&w)? + "\n")?;
    Ok(())
}
