//! Identity/camera cross-entropy, batch-hard triplet loss and their weighted sum.
//!
//! The tape ops live in [`crate::tensor`]; this module holds the loss
//! constants, plain-value helpers and the combined objective.

use crate::error::{Error, Result};
use crate::tensor::{batch_hard_selection, Tape, Var};

/// Log-probabilities below this are clamped in cross-entropy.
pub const LOG_PROB_FLOOR: f64 = -50.0;

pub const DEFAULT_MARGIN: f64 = 0.3;

/// Weight of the camera loss in the combined objective.
pub const DEFAULT_CAMERA_WEIGHT: f64 = 0.01;

/// `[d_ap - d_an + margin]_+`
pub fn triplet_hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Row maximum `m` and `ln(sum(exp(l - m)))`.
///
/// The maximal term contributes exactly 1, so the log is taken with `ln_1p`
/// of the remaining terms to keep confident rows accurate.
pub fn log_partition(row: &[f64]) -> (f64, f64) {
    let (arg, m) = row
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, l)| (l - m).exp())
        .sum();
    (m, rest.ln_1p())
}

/// Mean softmax cross-entropy of plain logit rows, without a tape.
pub fn cross_entropy_value(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::invalid("cross_entropy: logits and labels disagree"));
    }
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: row.len(),
            });
        }
        let (m, log_z) = log_partition(row);
        total -= (row[y] - m - log_z).max(LOG_PROB_FLOOR);
    }
    Ok(total / logits.len() as f64)
}

/// Batch-hard triplet loss over a precomputed row-major distance matrix.
pub fn triplet_loss_from_distances(dist: &[f64], n: usize, labels: &[usize], margin: f64) -> Result<f64> {
    let sel = batch_hard_selection(dist, n, labels)?;
    let total: f64 = sel
        .iter()
        .map(|t| triplet_hinge(dist[t.anchor * n + t.positive], dist[t.anchor * n + t.negative], margin))
        .sum();
    Ok(total / sel.len() as f64)
}

/// `person_ce + triplet + weight * camera_ce` on the tape.
pub fn combined_loss(tape: &mut Tape, person_ce: Var, triplet: Var, camera_ce: Option<Var>, weight: f64) -> Result<Var> {
    let person = tape.add(person_ce, triplet)?;
    match camera_ce {
        Some(cam) => {
            let weighted = tape.scale(cam, weight)?;
            tape.add(person, weighted)
        }
        None => Ok(person),
    }
}

/// Scalar loss values of one step, as logged per epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct LossTerms {
    pub person_ce: f64,
    pub triplet: f64,
    pub camera_ce: f64,
}

impl LossTerms {
    pub fn person(&self) -> f64 {
        self.person_ce + self.triplet
    }

    pub fn combined(&self, camera_weight: f64) -> f64 {
        self.person() + camera_weight * self.camera_ce
    }
}
