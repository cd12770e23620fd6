//! Run telemetry: per-step scalar logs and per-head gate balance snapshots.
//!
//! Gate balance is the per-head blend weight alpha = hard_sigmoid(raw);
//! alpha > 0.5 means the head leans on retrieved memory over local
//! attention. CSV floats use the shortest round-trip formatting, so files
//! parse back to the exact values that were logged.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::hard_sigmoid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    /// Gradient norm before clipping; the clipped norm is min(this, clip).
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceSnapshot {
    pub step: u64,
    /// alpha[layer][head], each in [0, 1].
    pub alpha: Vec<Vec<f64>>,
}

impl BalanceSnapshot {
    /// Apply the gate nonlinearity to checkpointed raw gate values.
    pub fn from_gate_raws(step: u64, raws: &[Vec<f64>]) -> Self {
        BalanceSnapshot {
            step,
            alpha: raws
                .iter()
                .map(|layer| layer.iter().map(|&r| hard_sigmoid(r)).collect())
                .collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.alpha.len()
    }

    pub fn heads(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }
}

pub fn mean_alpha(snap: &BalanceSnapshot) -> f64 {
    let n: usize = snap.alpha.iter().map(Vec::len).sum();
    if n == 0 {
        return 0.0;
    }
    snap.alpha.iter().flatten().sum::<f64>() / n as f64
}

/// Equal-width bins over [0, 1]; alpha = 1 lands in the last bin. Counts
/// always sum to layers x heads.
pub fn alpha_histogram(snap: &BalanceSnapshot, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    for &a in snap.alpha.iter().flatten() {
        let b = ((a * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

/// Per-layer count of heads preferring memory: alpha strictly above the
/// threshold.
pub fn layer_memory_preference(snap: &BalanceSnapshot, threshold: f64) -> Vec<usize> {
    snap.alpha
        .iter()
        .map(|layer| layer.iter().filter(|&&a| a > threshold).count())
        .collect()
}

/// Layers as rows, heads as columns.
pub fn alpha_heatmap_export(snap: &BalanceSnapshot) -> String {
    let mut out = String::new();
    for layer in &snap.alpha {
        let row: Vec<String> = layer.iter().map(|a| format!("{a}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_heatmap(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::InvalidArgument {
            op: "parse_heatmap",
            msg: format!("row {}: {e}", i + 1),
        })?);
    }
    Ok(rows)
}

pub const TELEMETRY_HEADER: &str = "step,loss,grad_norm,lr";
pub const ALPHA_HEADER: &str = "step,layer,head,alpha";

/// Append-only CSV writer for per-step scalars.
pub struct TelemetryWriter {
    w: BufWriter<File>,
}

impl TelemetryWriter {
    /// Create (with header) or append to an existing log.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = BufWriter::new(file);
        if fresh {
            writeln!(w, "{TELEMETRY_HEADER}")?;
        }
        Ok(TelemetryWriter { w })
    }

    pub fn log_step(&mut self, s: &StepLog) -> Result<()> {
        writeln!(self.w, "{},{},{},{}", s.step, s.loss, s.grad_norm, s.lr)?;
        self.w.flush()?;
        Ok(())
    }
}

pub fn read_telemetry(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, e: String| Error::InvalidArgument {
        op: "read_telemetry",
        msg: format!("line {line}: {e}"),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != TELEMETRY_HEADER {
                return Err(bad(1, format!("expected header {TELEMETRY_HEADER:?}, got {line:?}")));
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 columns, got {}", cols.len())));
        }
        out.push(StepLog {
            step: cols[0].parse().map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?,
            loss: cols[1].parse().map_err(|e: std::num::ParseFloatError| bad(i + 1, e.to_string()))?,
            grad_norm: cols[2].parse().map_err(|e: std::num::ParseFloatError| bad(i + 1, e.to_string()))?,
            lr: cols[3].parse().map_err(|e: std::num::ParseFloatError| bad(i + 1, e.to_string()))?,
        });
    }
    Ok(out)
}

/// Append-only CSV writer for balance snapshots, one row per head.
pub struct AlphaWriter {
    w: BufWriter<File>,
}

impl AlphaWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = BufWriter::new(file);
        if fresh {
            writeln!(w, "{ALPHA_HEADER}")?;
        }
        Ok(AlphaWriter { w })
    }

    pub fn log_snapshot(&mut self, snap: &BalanceSnapshot) -> Result<()> {
        for (l, layer) in snap.alpha.iter().enumerate() {
            for (h, a) in layer.iter().enumerate() {
                writeln!(self.w, "{},{},{},{}", snap.step, l, h, a)?;
            }
        }
        self.w.flush()?;
        Ok(())
    }
}

/// Rows grouped back into snapshots, in logged order.
pub fn read_alpha_log(path: &Path) -> Result<Vec<BalanceSnapshot>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, e: String| Error::InvalidArgument {
        op: "read_alpha_log",
        msg: format!("line {line}: {e}"),
    };
    let mut out: Vec<BalanceSnapshot> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != ALPHA_HEADER {
                return Err(bad(1, format!("expected header {ALPHA_HEADER:?}, got {line:?}")));
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 columns, got {}", cols.len())));
        }
        let step: u64 = cols[0].parse().map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?;
        let layer: usize = cols[1].parse().map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?;
        let head: usize = cols[2].parse().map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?;
        let alpha: f64 = cols[3].parse().map_err(|e: std::num::ParseFloatError| bad(i + 1, e.to_string()))?;
        if out.last().map(|s| s.step) != Some(step) {
            out.push(BalanceSnapshot { step, alpha: Vec::new() });
        }
        let snap = out.last_mut().unwrap();
        if snap.alpha.len() <= layer {
            snap.alpha.resize(layer + 1, Vec::new());
        }
        if snap.alpha[layer].len() != head {
            return Err(bad(i + 1, format!("head index {head} out of order")));
        }
        snap.alpha[layer].push(alpha);
    }
    Ok(out)
}
