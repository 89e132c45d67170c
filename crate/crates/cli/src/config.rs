//! Flag and config-file resolution.
//!
//! A JSON config file supplies defaults; any flag given on the command line
//! replaces the file's value. Boolean switches can only turn an option on.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use usp_core::Shape4;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Verify,
    Simulate,
    Cost,
}

/// `BxHxSxD`, e.g. `1x24x4608x128`.
pub fn parse_dims(s: &str) -> Result<Shape4, String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let [b, h, sq, d] = parts.as_slice() else {
        return Err(format!("expected BxHxSxD, got {s:?}"));
    };
    let num = |p: &str| -> Result<usize, String> {
        match p.trim().parse::<usize>() {
            Ok(0) => Err(format!("dimension in {s:?} must be at least 1")),
            Ok(v) => Ok(v),
            Err(_) => Err(format!("{p:?} in {s:?} is not a positive integer")),
        }
    };
    Ok(Shape4::new(num(b)?, num(h)?, num(sq)?, num(d)?))
}

fn dims_string(s: &Shape4) -> String {
    format!("{}x{}x{}x{}", s.batch, s.heads, s.seq, s.dim)
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON file with defaults for any of the options below.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Number of simulated workers N.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Upper bound on the ring dimension R.
    #[arg(long, value_name = "R")]
    pub max_ring: Option<usize>,
    /// Problem size as BxHxSxD.
    #[arg(long, value_name = "BxHxSxD", value_parser = parse_dims)]
    pub dims: Option<Shape4>,
    /// Quantize K/V traffic to E4M3.
    #[arg(long)]
    pub fp8_kv: bool,
    /// Double-buffered ring schedule.
    #[arg(long)]
    pub pipelined: bool,
    /// Model graph-captured kernel launches (cost only).
    #[arg(long)]
    pub compiled: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hardware profile JSON.
    #[arg(long, value_name = "PATH")]
    pub hw: Option<PathBuf>,
    /// Workload profile JSON.
    #[arg(long, value_name = "PATH")]
    pub workload: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

/// On-disk form of [`Flags`].
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    workers: Option<usize>,
    max_ring: Option<usize>,
    dims: Option<String>,
    #[serde(default)]
    fp8_kv: bool,
    #[serde(default)]
    pipelined: bool,
    #[serde(default)]
    compiled: bool,
    seed: Option<u64>,
    hw: Option<PathBuf>,
    workload: Option<PathBuf>,
    out: Option<PathBuf>,
    format: Option<Format>,
}

/// Fully resolved options, echoed into every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub workers: Option<usize>,
    pub max_ring: Option<usize>,
    #[serde(serialize_with = "ser_dims")]
    pub dims: Option<Shape4>,
    pub fp8_kv: bool,
    pub pipelined: bool,
    pub compiled: bool,
    pub seed: Option<u64>,
    pub hw: Option<PathBuf>,
    pub workload: Option<PathBuf>,
    pub format: Format,
    /// Not part of the report so that the same run written to two places
    /// produces identical bytes.
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

fn ser_dims<S: serde::Serializer>(d: &Option<Shape4>, s: S) -> Result<S::Ok, S::Error> {
    d.as_ref().map(dims_string).serialize(s)
}

fn read_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))
}

impl RunConfig {
    pub fn resolve(command: Command, flags: Flags) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(p) => read_file_config(p)?,
            None => FileConfig::default(),
        };
        let dims = match flags.dims {
            Some(d) => Some(d),
            None => file
                .dims
                .as_deref()
                .map(parse_dims)
                .transpose()
                .map_err(CliError::Config)?,
        };
        let cfg = RunConfig {
            command,
            workers: flags.workers.or(file.workers),
            max_ring: flags.max_ring.or(file.max_ring),
            dims,
            fp8_kv: flags.fp8_kv || file.fp8_kv,
            pipelined: flags.pipelined || file.pipelined,
            compiled: flags.compiled || file.compiled,
            seed: flags.seed.or(file.seed),
            hw: flags.hw.or(file.hw),
            workload: flags.workload.or(file.workload),
            format: flags.format.or(file.format).unwrap_or_default(),
            out: flags.out.or(file.out),
        };
        if cfg.workers == Some(0) {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        if cfg.max_ring == Some(0) {
            return Err(CliError::Config("--max-ring must be at least 1".into()));
        }
        if command != Command::Cost && cfg.format == Format::Csv {
            return Err(CliError::Config("csv output is only available for cost".into()));
        }
        Ok(cfg)
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("a --seed is required for verify and simulate".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("1x24x4608x128"), Ok(Shape4::new(1, 24, 4608, 128)));
        assert!(parse_dims("1x2x3").is_err());
        assert!(parse_dims("1x0x3x4").is_err());
        assert!(parse_dims("1xax3x4").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"workers": 8, "seed": 5, "dims": "1x4x16x8", "fp8_kv": true}"#,
        )
        .unwrap();
        let flags = Flags {
            config: Some(path),
            workers: Some(4),
            ..Flags::default()
        };
        let cfg = RunConfig::resolve(Command::Simulate, flags).unwrap();
        assert_eq!(cfg.workers, Some(4));
        assert_eq!(cfg.seed, Some(5));
        assert_eq!(cfg.dims, Some(Shape4::new(1, 4, 16, 8)));
        assert!(cfg.fp8_kv);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"wrokers": 8}"#).unwrap();
        let flags = Flags {
            config: Some(path),
            ..Flags::default()
        };
        assert!(matches!(
            RunConfig::resolve(Command::Verify, flags),
            Err(CliError::Config(_))
        ));
    }
}
