//! Per-round metrics and their CSV form.
//!
//! Empty cells mean "not computed this round". Infinite ratios are written
//! as `inf`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::losses::Objective;

/// Bumped whenever [`COLUMNS`] changes.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

pub const COLUMNS: [&str; 18] = [
    "round",
    "objective",
    "mean_loss",
    "max_loss",
    "max_to_rest",
    "c_t",
    "buffer_size",
    "buffer_min_reward",
    "certificate_bound",
    "certificate_main_term",
    "skipped",
    "forward_only",
    "exact_tv",
    "total_l1",
    "modes",
    "mean_delta",
    "active_delta_fraction",
    "log_z",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u64,
    pub objective: Objective,
    pub mean_loss: f64,
    pub max_loss: f64,
    pub max_to_rest: f64,
    /// Threshold in force during the round.
    pub c_t: Option<f64>,
    pub buffer_size: usize,
    pub buffer_min_reward: Option<f64>,
    pub certificate_bound: Option<f64>,
    pub certificate_main_term: Option<f64>,
    pub skipped: bool,
    /// The backward half was dropped because the buffer was still empty.
    pub forward_only: bool,
    pub exact_tv: Option<f64>,
    pub total_l1: Option<f64>,
    /// Distinct mode regions met in training samples so far.
    pub modes: usize,
    pub mean_delta: f64,
    pub active_delta_fraction: f64,
    pub log_z: f64,
}

/// Writes the header, then one line per row. An empty slice still gets
/// the header.
pub fn write_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows back, rejecting files whose header differs from [`COLUMNS`].
pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(invalid(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    for r in rd.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}
