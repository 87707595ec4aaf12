use serde::{Deserialize, Serialize};

use super::{decode_deltas, iou, RegionSample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Mean IoU of decoded predicted boxes against ground truth, over true foreground samples.
    pub mean_iou_fg: f64,
    /// Single-threshold average precision.
    pub ap50: f64,
}

/// Area under the precision/recall curve with the monotone precision envelope.
///
/// `detections` are `(score, is_true_positive)`; `num_positives` is the number
/// of ground-truth objects. Ties in score keep input order.
pub fn average_precision(detections: &[(f64, bool)], num_positives: usize) -> f64 {
    if num_positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].0.total_cmp(&detections[a].0));

    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        tp += usize::from(detections[i].1);
        recall.push(tp as f64 / num_positives as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores class probabilities `[n, K]` and box deltas `[n, 4]` against `samples`.
///
/// Every sample predicted as a foreground class is a detection scored by its
/// predicted-class probability; it is a true positive when the class matches
/// and the decoded box reaches `iou_threshold` against the sample's ground
/// truth. Each sample owns one ground truth, so each is matched at most once.
pub fn evaluate(probs: &Tensor, deltas: &Tensor, samples: &[RegionSample], iou_threshold: f64) -> Result<EvalMetrics> {
    let n = samples.len();
    if probs.rows() != n || deltas.rows() != n {
        return Err(Error::Length {
            what: "predictions vs samples",
            left: probs.rows().min(deltas.rows()),
            right: n,
        });
    }
    if deltas.cols() != 4 {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: deltas.shape().to_vec(),
            rhs: vec![n, 4],
        });
    }
    let mut correct = 0usize;
    let mut iou_sum = 0.0;
    let mut n_fg = 0usize;
    let mut detections = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        correct += usize::from(pred == s.label);
        let d = deltas.row(i);
        let overlap = match s.gt {
            Some(gt) => {
                let decoded = decode_deltas(&[d[0], d[1], d[2], d[3]], &s.proposal)?;
                let v = iou(&decoded, &gt)?;
                iou_sum += v;
                n_fg += 1;
                v
            }
            None => 0.0,
        };
        if pred != 0 {
            let hit = s.label == pred && overlap >= iou_threshold;
            detections.push((row[pred], hit));
        }
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / n.max(1) as f64,
        mean_iou_fg: if n_fg == 0 { 0.0 } else { iou_sum / n_fg as f64 },
        ap50: average_precision(&detections, n_fg),
    })
}
