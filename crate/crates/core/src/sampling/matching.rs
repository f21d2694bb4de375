use serde::{Deserialize, Serialize};

use super::oks::{oks, OksParams};
use crate::geometry::{bbox_from_pose, iou, BBox, BoxConfig, Pose};
use crate::io::GtInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMetric {
    Oks,
    BboxIou,
}

/// Default similarity floor for pool building.
pub const DEFAULT_MATCH_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction index, gt index, similarity)` in assignment order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn is_one_to_one(&self) -> bool {
        let mut p: Vec<_> = self.pairs.iter().map(|t| t.0).collect();
        let mut g: Vec<_> = self.pairs.iter().map(|t| t.1).collect();
        p.sort_unstable();
        g.sort_unstable();
        p.windows(2).all(|w| w[0] != w[1]) && g.windows(2).all(|w| w[0] != w[1])
    }

    pub fn gt_for_pred(&self, pred: usize) -> Option<(usize, f64)> {
        self.pairs.iter().find(|t| t.0 == pred).map(|t| (t.1, t.2))
    }
}

/// Prediction priority: score descending, lower index first on ties.
pub fn priority_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy one-to-one assignment on a `preds x gts` similarity matrix: each
/// prediction in priority order takes the free GT of highest similarity
/// `>= floor` (lower GT index on ties).
pub fn greedy_match(scores: &[f64], sim: &[Vec<f64>], n_gts: usize, floor: f64) -> MatchResult {
    let mut taken = vec![false; n_gts];
    let mut res = MatchResult::default();
    for p in priority_order(scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, &s) in sim[p].iter().enumerate() {
            if taken[g] || s < floor {
                continue;
            }
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((g, s));
            }
        }
        match best {
            Some((g, s)) => {
                taken[g] = true;
                res.pairs.push((p, g, s));
            }
            None => res.unmatched_preds.push(p),
        }
    }
    res.unmatched_preds.sort_unstable();
    res.unmatched_gts = (0..n_gts).filter(|&g| !taken[g]).collect();
    res
}

/// Box used for IoU matching of a prediction.
pub fn prediction_box(pose: &Pose) -> Option<BBox> {
    bbox_from_pose(pose, &BoxConfig::with_margin(0.0), None).ok()
}

/// Similarity of every prediction to every GT; undefined similarities are 0.
pub fn similarity_matrix(preds: &[Pose], gts: &[GtInstance], metric: MatchMetric, params: &OksParams) -> Vec<Vec<f64>> {
    let pred_boxes: Vec<Option<BBox>> = match metric {
        MatchMetric::BboxIou => preds.iter().map(prediction_box).collect(),
        MatchMetric::Oks => Vec::new(),
    };
    preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            gts.iter()
                .map(|g| match metric {
                    MatchMetric::Oks => oks(p, &g.pose, params.scale(&g.bbox, g.area), params).unwrap_or(0.0),
                    MatchMetric::BboxIou => pred_boxes[i].map(|b| iou(&b, &g.bbox)).unwrap_or(0.0),
                })
                .collect()
        })
        .collect()
}

pub fn match_to_gt(preds: &[Pose], gts: &[GtInstance], metric: MatchMetric, floor: f64, params: &OksParams) -> MatchResult {
    let sim = similarity_matrix(preds, gts, metric, params);
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    greedy_match(&scores, &sim, gts.len(), floor)
}
