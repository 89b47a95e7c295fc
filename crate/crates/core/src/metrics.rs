//! Line-delimited metric records shared by training loops, the evaluation
//! harness, and the CLI reporter.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub task: String,
    pub regime: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub step: u64,
}

impl MetricRecord {
    pub fn new(
        task: impl Into<String>,
        regime: impl Into<String>,
        metric: impl Into<String>,
        value: f64,
        seed: u64,
        step: u64,
    ) -> Self {
        MetricRecord {
            task: task.into(),
            regime: regime.into(),
            metric: metric.into(),
            value,
            seed,
            step,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("serializable record")
    }
}

pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", r.to_line())?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| VfmError::Manifest { line: i + 1, msg: e.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_lines_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let records = vec![
            MetricRecord::new("motion", "frozen", "accuracy", 0.75, 1, 500),
            MetricRecord::new("retrieval", "zero-shot", "r@1", 0.53, 1, 2000),
        ];
        write_records(&path, &records).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
        // Identical inputs serialize to identical bytes.
        let a = std::fs::read(&path).unwrap();
        write_records(&path, &records).unwrap();
        assert_eq!(a, std::fs::read(&path).unwrap());
    }
}
