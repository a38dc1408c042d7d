//! Per-epoch metrics as JSON lines.

use std::io::Write;

use opera_core::training::EpochMetrics;
use serde::{Deserialize, Serialize};

/// One line of `metrics.jsonl`. Losses that a mode does not compute are 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_self: f64,
    pub loss_full: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn from_epoch(m: &EpochMetrics, wall_ms: u64) -> Self {
        MetricsRecord {
            epoch: m.epoch,
            loss_total: m.loss_total,
            loss_self: m.loss_self,
            loss_full: m.loss_full,
            lr: m.lr,
            wall_ms,
        }
    }
}

pub fn write_jsonl<W: Write>(records: &[MetricsRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_parse_back() {
        let recs = vec![
            MetricsRecord { epoch: 1, loss_total: 1.5, loss_self: 1.0, loss_full: 0.5, lr: 0.05, wall_ms: 0 },
            MetricsRecord { epoch: 2, loss_total: 0.1 + 0.2, loss_self: 0.1, loss_full: 0.2, lr: 1e-7, wall_ms: 12 },
        ];
        let mut buf = Vec::new();
        write_jsonl(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back: Vec<MetricsRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, recs);
        assert!(text.starts_with("{\"epoch\":1,\"loss_total\":1.5,"));
    }
}
