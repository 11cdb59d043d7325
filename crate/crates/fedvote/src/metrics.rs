//! Per-round measurements and their line-delimited JSON serialization.
//!
//! Every simulated round emits one [`RoundMetrics`] record. Runs stream
//! them append-only, one JSON object per line, so an interrupted run keeps
//! every completed round.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One round's measurements.
///
/// `train_loss` and `grad_norm_sq` average over the participants whose
/// local training actually ran (payload attackers that skip training are
/// excluded); the gradient norm is taken at the first local step, i.e. at
/// the broadcast point. `uplink_bytes_total` sums the serialized payload
/// lengths the round's participants produced. The two accuracy fields are
/// populated on evaluation rounds and null otherwise; `per_client_cr`
/// holds the round's credibility scores when the aggregator tracks
/// reputations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub test_accuracy_quantized: Option<f64>,
    pub uplink_bytes_total: u64,
    pub grad_norm_sq: f64,
    pub per_client_cr: Option<Vec<f64>>,
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn to_json_line(metrics: &RoundMetrics) -> Result<String> {
    serde_json::to_string(metrics).map_err(|e| Error::format(0, e.to_string()))
}

/// Appends one record to a writer as a JSON line and flushes, so partial
/// runs keep completed rounds.
pub fn append_json_line<W: Write>(out: &mut W, metrics: &RoundMetrics) -> Result<()> {
    let line = to_json_line(metrics)?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Reads a whole metrics stream. Format errors carry the 1-based line
/// number in the offset field.
pub fn read_json_lines<R: BufRead>(input: R) -> Result<Vec<RoundMetrics>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::format((i + 1) as u64, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

/// Reads a metrics file written by [`append_json_line`].
pub fn read_metrics_file(path: &Path) -> Result<Vec<RoundMetrics>> {
    let file = std::fs::File::open(path)?;
    read_json_lines(std::io::BufReader::new(file))
}
