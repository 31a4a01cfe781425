use std::fmt;
use std::str::FromStr;

use super::ModelError;
use crate::augment::argmax;
use crate::data::Modality;
use crate::tape::softmax;
use crate::tensor::TensorError;

/// Modality sets fused at score level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    /// joint
    E1,
    /// joint + bone
    E2,
    /// joint + bone + joint motion + bone motion
    E4,
}

impl EnsembleKind {
    pub fn modalities(self) -> &'static [Modality] {
        match self {
            EnsembleKind::E1 => &[Modality::Joint],
            EnsembleKind::E2 => &[Modality::Joint, Modality::Bone],
            EnsembleKind::E4 => &Modality::ALL,
        }
    }
}

impl fmt::Display for EnsembleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for EnsembleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "E1" => Ok(EnsembleKind::E1),
            "E2" => Ok(EnsembleKind::E2),
            "E4" => Ok(EnsembleKind::E4),
            _ => Err(format!("unknown ensemble `{s}` (expected E1, E2 or E4)")),
        }
    }
}

fn mismatch(detail: String) -> ModelError {
    TensorError::Dimension { op: "ensemble_scores", detail }.into()
}

/// Weighted sum of per-set softmax scores; returns the fused scores and
/// their argmax per sample. `sets[m][i]` holds model `m`'s raw class scores
/// for sample `i`.
pub fn ensemble_scores(sets: &[Vec<Vec<f64>>], weights: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<usize>), ModelError> {
    let Some(first) = sets.first() else {
        return Err(ModelError::Config("no score sets to fuse".into()));
    };
    if weights.len() != sets.len() {
        return Err(mismatch(format!("{} weights for {} score sets", weights.len(), sets.len())));
    }
    let n = first.len();
    let k = first.first().map_or(0, Vec::len);
    for (m, set) in sets.iter().enumerate() {
        if set.len() != n {
            return Err(mismatch(format!("set {m} has {} samples, set 0 has {n}", set.len())));
        }
        if let Some(row) = set.iter().find(|r| r.len() != k) {
            return Err(mismatch(format!("set {m} has a row of {} classes, expected {k}", row.len())));
        }
    }
    let mut fused = vec![vec![0.0; k]; n];
    for (set, &w) in sets.iter().zip(weights) {
        for (acc, row) in fused.iter_mut().zip(set) {
            for (a, p) in acc.iter_mut().zip(softmax(row)) {
                *a += w * p;
            }
        }
    }
    let preds = fused.iter().map(|r| argmax(r)).collect();
    Ok((fused, preds))
}

/// Accuracy of the equally weighted fusion of `sets` against `labels`.
pub fn ensemble_accuracy(sets: &[Vec<Vec<f64>>], labels: &[usize]) -> Result<f64, ModelError> {
    let (_, preds) = ensemble_scores(sets, &vec![1.0; sets.len()])?;
    if preds.len() != labels.len() {
        return Err(mismatch(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(if labels.is_empty() { 0.0 } else { hits as f64 / labels.len() as f64 })
}
