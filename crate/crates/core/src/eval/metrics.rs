//! Greedy detection matching and 40-point interpolated average precision.

use serde::{Deserialize, Serialize};

use crate::geometry::{Box2D, Box3D};

pub const RECALL_POINTS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub box3d: Box3D,
    pub box2d: Box2D,
    pub score: f64,
}

/// Interpolated precision at recall `i/40` for `i = 1..=40`.
#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    pub precisions: Vec<f64>,
    pub ap: f64,
    /// Set when there were no ground truths; `ap` is then 0 by definition.
    pub no_ground_truth: bool,
}

/// Indices of `scores` by descending score; ties keep insertion order.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching in score order. Returns one TP flag per detection, in input order.
///
/// Each detection claims the unclaimed ground truth of highest IoU when that
/// IoU reaches `threshold`; each ground truth is claimed at most once.
pub fn match_detections(
    dets: &[Detection],
    gts: &[Box3D],
    iou_fn: impl Fn(&Box3D, &Box3D) -> f64,
    threshold: f64,
) -> Vec<bool> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut claimed = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in score_order(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let iou = iou_fn(&dets[i].box3d, gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            if iou >= threshold {
                claimed[g] = true;
                flags[i] = true;
            }
        }
    }
    flags
}

/// AP|R40 from scored TP/FP flags pooled over a dataset.
///
/// Operating points are score thresholds: at threshold `t` every detection
/// with score at least `t` counts, so tied scores enter together. Precision
/// at recall `r` is the best precision among operating points whose recall
/// reaches `r`, or 0 if none does.
pub fn ap_r40(scored: &[(f64, bool)], num_gt: usize) -> PRCurve {
    if num_gt == 0 {
        return PRCurve {
            precisions: vec![0.0; RECALL_POINTS],
            ap: 0.0,
            no_ground_truth: true,
        };
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let order = score_order(&scores);
    // (true positives, precision) at the end of each group of tied scores.
    let mut points: Vec<(usize, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (rank, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = order
            .get(rank + 1)
            .is_none_or(|&next| scores[next] != scores[i]);
        if group_ends {
            points.push((tp, tp as f64 / (tp + fp) as f64));
        }
    }
    // Right-max: best precision at or beyond each point.
    let mut best_from = vec![0.0f64; points.len() + 1];
    for k in (0..points.len()).rev() {
        best_from[k] = best_from[k + 1].max(points[k].1);
    }
    let mut precisions = Vec::with_capacity(RECALL_POINTS);
    let mut k = 0;
    for i in 1..=RECALL_POINTS {
        // recall tp/num_gt >= i/40, compared exactly in integers
        while k < points.len() && points[k].0 * RECALL_POINTS < i * num_gt {
            k += 1;
        }
        precisions.push(best_from[k]);
    }
    let ap = precisions.iter().sum::<f64>() / RECALL_POINTS as f64;
    PRCurve {
        precisions,
        ap,
        no_ground_truth: false,
    }
}
