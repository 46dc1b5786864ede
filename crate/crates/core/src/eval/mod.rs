//! Metrics and evaluation protocols.

mod metrics;
mod protocols;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{KtError, Result};

pub use metrics::{auc, compute_metrics, Metrics, ACC_THRESHOLD};
pub use protocols::{
    knowledge_trace, masked_all, multi_concept, multi_step, one_step, one_step_last, EvalOptions, Prediction,
    Scored,
};

/// Metrics of one protocol run. `metrics` is absent when nothing was scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub protocol: String,
    pub horizon: Option<usize>,
    pub history: usize,
    pub metrics: Option<Metrics>,
    pub skipped: usize,
}

impl ProtocolResult {
    pub fn from_predictions(
        protocol: impl Into<String>,
        horizon: Option<usize>,
        history: usize,
        predictions: &[Prediction],
        skipped: usize,
    ) -> Result<Self> {
        let metrics = if predictions.is_empty() {
            None
        } else {
            let (scores, labels) = scores_and_labels(predictions);
            Some(compute_metrics(&scores, &labels)?)
        };
        Ok(Self {
            protocol: protocol.into(),
            horizon,
            history,
            metrics,
            skipped,
        })
    }

    pub fn auc(&self) -> Option<f64> {
        self.metrics.as_ref().and_then(|m| m.auc)
    }
}

pub fn scores_and_labels(predictions: &[Prediction]) -> (Vec<f64>, Vec<u8>) {
    predictions.iter().map(|p| (p.score, p.label)).unzip()
}

/// Writes `student,step,concept,score,label` rows.
pub fn write_predictions<W: Write>(predictions: &[Prediction], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| KtError::contract(format!("csv write failed: {e}"));
    w.write_record(["student", "step", "concept", "score", "label"]).map_err(err)?;
    for p in predictions {
        w.serialize((p.student, p.step, p.concept, p.score, p.label)).map_err(err)?;
    }
    w.flush().map_err(|e| KtError::contract(format!("csv write failed: {e}")))?;
    Ok(())
}

/// Reads rows written by [`write_predictions`].
pub fn read_predictions<R: std::io::Read>(reader: R) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            let (student, step, concept, score, label): (u64, usize, usize, f64, u8) =
                row.map_err(|e| KtError::Parse {
                    line: i as u64 + 2,
                    msg: e.to_string(),
                })?;
            Ok(Prediction {
                student,
                step,
                concept,
                score,
                label,
            })
        })
        .collect()
}
