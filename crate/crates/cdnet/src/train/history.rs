//! Line-delimited training history.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::Real;
use crate::objectives::LossValues;

/// One optimizer-step record. `total` always equals
/// `cls + lambda_d * domain + lambda_r * reg` with the run's weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: String,
    pub cls: Real,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain: Option<Real>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg: Option<Real>,
    pub total: Real,
}

/// Periodic validation accuracy during fine-tuning.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValRecord {
    pub episode: usize,
    pub accuracy: Real,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HistoryEvent {
    Loss(LossRecord),
    Validation(ValRecord),
}

/// Ordered event log of one training stage.
#[derive(Clone, Debug, Default)]
pub struct History {
    pub events: Vec<HistoryEvent>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_loss(&mut self, step: u64, stage: &str, values: &LossValues) {
        self.events.push(HistoryEvent::Loss(LossRecord {
            step,
            stage: stage.to_string(),
            cls: values.cls,
            domain: values.domain,
            reg: values.reg,
            total: values.total,
        }));
    }

    pub fn push_validation(&mut self, episode: usize, accuracy: Real) {
        self.events.push(HistoryEvent::Validation(ValRecord { episode, accuracy }));
    }

    pub fn loss_records(&self) -> impl Iterator<Item = &LossRecord> {
        self.events.iter().filter_map(|e| match e {
            HistoryEvent::Loss(r) => Some(r),
            _ => None,
        })
    }

    /// Mean total loss over the first `n` recorded steps.
    pub fn head_mean_total(&self, n: usize) -> Option<Real> {
        mean(self.loss_records().take(n).map(|r| r.total))
    }

    /// Mean total loss over the last `n` recorded steps.
    pub fn tail_mean_total(&self, n: usize) -> Option<Real> {
        let totals: Vec<Real> = self.loss_records().map(|r| r.total).collect();
        let start = totals.len().saturating_sub(n);
        mean(totals[start..].iter().copied())
    }

    /// Write as JSON lines.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for event in &self.events {
            writeln!(out, "{}", serde_json::to_string(event).expect("history json"))?;
        }
        fs::write(path, out)?;
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = Real>) -> Option<Real> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v;
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as Real)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut h = History::new();
        h.push_loss(
            1,
            "pretrain",
            &LossValues { total: 2.5, cls: 2.0, domain: Some(0.5), reg: None },
        );
        h.push_validation(10, 0.8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        h.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: HistoryEvent = serde_json::from_str(lines[0]).unwrap();
        assert!(matches!(back, HistoryEvent::Loss(r) if r.step == 1));
    }

    #[test]
    fn head_and_tail_means() {
        let mut h = History::new();
        for (i, total) in [4.0, 2.0, 1.0, 1.0].iter().enumerate() {
            h.push_loss(
                i as u64,
                "x",
                &LossValues { total: *total, cls: *total, domain: None, reg: None },
            );
        }
        assert_eq!(h.head_mean_total(2), Some(3.0));
        assert_eq!(h.tail_mean_total(2), Some(1.0));
    }
}
