use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    SegmentAccuracy,
    Miou,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::SegmentAccuracy => "segment_accuracy",
            MetricKind::Miou => "miou",
        }
    }
}

/// Fraction of timestamps whose predicted label is correct.
pub fn segment_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Config(format!(
            "segment_accuracy: {} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / gt.len() as f64)
}

/// `|P∩G| / |P∪G|` of binary masks; an empty union counts as 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pixels whose logit is positive, i.e. sigmoid above 0.5.
pub fn threshold_logits(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&x| x > 0.0).collect()
}

pub fn binary(mask: &Tensor) -> Vec<bool> {
    mask.data().iter().map(|&v| v > 0.5).collect()
}

/// Mean IoU over samples (one sample per frame).
pub fn miou(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Config(format!("miou: {} predictions for {} masks", pred.len(), gt.len())));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::Config(format!(
                "miou: mask of {} pixels against {}",
                p.len(),
                g.len()
            )));
        }
        total += iou(p, g);
    }
    Ok(total / gt.len() as f64)
}
