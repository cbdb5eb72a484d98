//! Classifier loss and accuracy.

use std::collections::HashMap;

use num_traits::Float;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::GraphRecord;
use crate::extraction::{threshold_mask, MaskError, PredictionMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{targets} targets but {probs} probabilities")]
    LengthMismatch { targets: usize, probs: usize },
    #[error("empty graph")]
    Empty,
    #[error("no prediction for graph `{0}`")]
    MissingMask(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Mean binary cross-entropy over the nodes of one graph. Probabilities are
/// clamped to `[eps, 1 - eps]` with `eps = 1e-7`.
pub fn reference_loss<T: Float>(targets: &[bool], probs: &[T]) -> Result<T, MetricsError> {
    if targets.len() != probs.len() {
        return Err(MetricsError::LengthMismatch {
            targets: targets.len(),
            probs: probs.len(),
        });
    }
    if targets.is_empty() {
        return Err(MetricsError::Empty);
    }
    let eps = T::from(1e-7).expect("representable");
    let one = T::one();
    let mut sum = T::zero();
    for (&t, &p) in targets.iter().zip(probs) {
        let p = p.max(eps).min(one - eps);
        sum = sum + if t { p.ln() } else { (one - p).ln() };
    }
    Ok(-sum / T::from(targets.len()).expect("representable"))
}

/// [`reference_loss`] for a dataset record.
pub fn record_loss<T: Float>(record: &GraphRecord, probs: &[T]) -> Result<T, MetricsError> {
    reference_loss(&record.targets(), probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub node_accuracy: f64,
    pub proof_accuracy: f64,
    pub nodes: usize,
    pub records: usize,
}

/// Node-level and proof-level accuracy of thresholded predictions.
pub fn score_predictions(records: &[GraphRecord], masks: &[PredictionMask]) -> Result<Scores, MetricsError> {
    let by_id: HashMap<&str, &PredictionMask> = masks.iter().map(|m| (m.graph_id.as_str(), m)).collect();
    let mut correct_nodes = 0usize;
    let mut nodes = 0usize;
    let mut correct_records = 0usize;
    for r in records {
        let m = by_id
            .get(r.graph_id.as_str())
            .ok_or_else(|| MetricsError::MissingMask(r.graph_id.clone()))?;
        let sel = threshold_mask(m, r.nodes.len())?;
        let right = r.nodes.iter().zip(&sel).filter(|(n, s)| n.target == **s).count();
        correct_nodes += right;
        nodes += r.nodes.len();
        if right == r.nodes.len() {
            correct_records += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Scores {
        node_accuracy: ratio(correct_nodes, nodes),
        proof_accuracy: ratio(correct_records, records.len()),
        nodes,
        records: records.len(),
    })
}
