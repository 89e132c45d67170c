use serde::{Deserialize, Serialize};

use super::LatencyBreakdown;

pub const CSV_HEADER: [&str; 7] = [
    "config",
    "compute_ms",
    "comm_exposed_ms",
    "comm_hidden_ms",
    "launch_ms",
    "total_ms",
    "speedup",
];

/// One row of a cost sweep, in milliseconds per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub config: String,
    pub compute_ms: f64,
    pub comm_exposed_ms: f64,
    pub comm_hidden_ms: f64,
    pub launch_ms: f64,
    pub total_ms: f64,
    /// Relative to the row's baseline, when it has one.
    pub speedup: Option<f64>,
}

impl CostRow {
    pub fn new(config: impl Into<String>, b: &LatencyBreakdown, speedup: Option<f64>) -> Self {
        Self {
            config: config.into(),
            compute_ms: b.compute * 1e3,
            comm_exposed_ms: b.exposed_comm * 1e3,
            comm_hidden_ms: b.hidden_comm * 1e3,
            launch_ms: b.launch * 1e3,
            total_ms: b.total * 1e3,
            speedup,
        }
    }
}

/// Rows as UTF-8 CSV with LF line endings and the [`CSV_HEADER`] columns.
pub fn breakdown_csv(rows: &[CostRow]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_HEADER).expect("write to memory");
    }
    for r in rows {
        w.serialize(r).expect("write to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_quoting() {
        let b = LatencyBreakdown {
            compute: 1e-3,
            exposed_comm: 0.5e-3,
            hidden_comm: 0.0,
            launch: 0.25e-3,
            total: 1.75e-3,
            steps: 1,
        };
        let csv = breakdown_csv(&[CostRow::new("N=2 (R=1, U=2)", &b, None)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "\"N=2 (R=1, U=2)\",1.0,0.5,0.0,0.25,1.75,");
        assert!(!csv.contains('\r'));
        assert_eq!(breakdown_csv(&[]).trim_end(), CSV_HEADER.join(","));
    }
}
