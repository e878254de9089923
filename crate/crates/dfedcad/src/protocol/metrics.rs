//! Per-round, per-client metrics and their JSONL/CSV serializations.

use crate::error::Result;
use serde::{Deserialize, Serialize};

/// One row per (round, active client). `acc` is null when the client has an
/// empty test split; `align_loss` is null whenever no alignment ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u32,
    pub client_id: u32,
    pub delayed: bool,
    pub acc: Option<f64>,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
    pub flops: u64,
    pub align_loss: Option<f64>,
}

/// One JSON object per line, in row order.
pub fn to_jsonl(rows: &[MetricsRow]) -> Result<String> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    Ok(out)
}

/// CSV mirror with identical columns; empty cells for null values.
pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("round,client_id,delayed,acc,bytes_sent,bytes_recv,flops,align_loss\n");
    for r in rows {
        let acc = r.acc.map(|a| a.to_string()).unwrap_or_default();
        let align = r.align_loss.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.round, r.client_id, r.delayed, acc, r.bytes_sent, r.bytes_recv, r.flops, align
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> MetricsRow {
        MetricsRow {
            round: 3,
            client_id: 1,
            delayed: true,
            acc: Some(0.5),
            bytes_sent: 120,
            bytes_recv: 60,
            flops: 9000,
            align_loss: None,
        }
    }

    #[test]
    fn jsonl_has_one_object_per_line_with_all_fields() {
        let text = to_jsonl(&[row(), row()]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for field in ["round", "client_id", "delayed", "acc", "bytes_sent", "bytes_recv", "flops", "align_loss"] {
            assert!(v.get(field).is_some(), "missing {field}");
        }
        assert!(v["align_loss"].is_null());
        assert_eq!(v["acc"], 0.5);
    }

    #[test]
    fn csv_mirrors_jsonl_columns() {
        let text = to_csv(&[row()]);
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,client_id,delayed,acc,bytes_sent,bytes_recv,flops,align_loss"
        );
        assert_eq!(lines.next().unwrap(), "3,1,true,0.5,120,60,9000,");
    }
}
