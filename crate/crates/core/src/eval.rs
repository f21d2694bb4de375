//! OKS average precision, crowdedness bands and precision/recall curves.
//!
//! Predictions are ranked globally by score (descending), then by image order
//! in the annotation file, then by in-image rank. Within an image, greedy
//! matching in that rank order decides true and false positives. AP is the
//! area under the monotone precision envelope: `sum_i dR_i * max_{j>=i} P_j`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::io::{Dataset, PredictionFile, SceneAnnotation};
use crate::sampling::matching::{greedy_match, priority_order};
use crate::sampling::oks::{oks, OksParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Upper-exclusive maxIoU boundaries between crowdedness bands.
    pub band_boundaries: Vec<f64>,
    pub max_detections: usize,
    pub oks: OksParams,
}

pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl EvalConfig {
    pub fn new(oks: OksParams) -> Self {
        Self {
            thresholds: default_thresholds(),
            band_boundaries: vec![0.3, 0.6],
            max_detections: 20,
            oks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inc = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if self.thresholds.is_empty() || !inc(&self.thresholds) || self.thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config("oks thresholds must be strictly increasing in (0, 1]".into()));
        }
        if !inc(&self.band_boundaries) || self.band_boundaries.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(Error::Config("band boundaries must be strictly increasing in (0, 1]".into()));
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be positive".into()));
        }
        Ok(())
    }

    pub fn band_of(&self, max_iou: f64) -> usize {
        self.band_boundaries.iter().position(|&b| max_iou < b).unwrap_or(self.band_boundaries.len())
    }

    pub fn num_bands(&self) -> usize {
        self.band_boundaries.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub ap: f64,
    /// Precision and recall after each ranked prediction.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchAudit {
    pub image_id: u64,
    /// Index into the image's prediction list.
    pub prediction: usize,
    pub score: f64,
    pub gt_instance: Option<u64>,
    pub oks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub name: String,
    /// `[lower, upper)` maxIoU range.
    pub range: [f64; 2],
    pub images: usize,
    /// `None` when the band holds no images.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub num_images: usize,
    pub num_gts: usize,
    pub num_predictions: usize,
    pub per_threshold: Vec<ThresholdResult>,
    pub bands: Vec<BandResult>,
    /// Matches at the lowest threshold.
    pub audit: Vec<MatchAudit>,
    /// Configuration that produced the report.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn band_ap(&self, band: usize) -> Option<f64> {
        self.bands.get(band).and_then(|b| b.ap)
    }

    pub fn ap_low(&self) -> Option<f64> {
        self.band_ap(0)
    }

    pub fn ap_medium(&self) -> Option<f64> {
        self.band_ap(1)
    }

    pub fn ap_high(&self) -> Option<f64> {
        self.band_ap(self.bands.len().saturating_sub(1))
    }

    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold.iter().find(|t| (t.threshold - threshold).abs() < 1e-9).map(|t| t.ap)
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
        let mut s = String::new();
        let _ = writeln!(s, "images {}  gts {}  predictions {}", self.num_images, self.num_gts, self.num_predictions);
        let _ = writeln!(s, "AP      {:.4}", self.ap);
        for b in &self.bands {
            let _ = writeln!(s, "AP_{:<5} {}  ({} images, maxIoU [{:.2}, {:.2}))", b.name, fmt(b.ap), b.images, b.range[0], b.range[1]);
        }
        for t in &self.per_threshold {
            let _ = writeln!(s, "AP@{:.2} {:.4}", t.threshold, t.ap);
        }
        s
    }
}

/// Per-image ranked predictions and their OKS against every GT.
struct ImageEval {
    image_order: usize,
    image_id: u64,
    /// Prediction indices in rank order, truncated to max detections.
    ranked: Vec<usize>,
    scores: Vec<f64>,
    /// `sim[p][g]` for ranked position `p`.
    sim: Vec<Vec<f64>>,
    gt_ids: Vec<u64>,
}

fn prepare(preds: &PredictionFile, gts: &Dataset, cfg: &EvalConfig) -> Result<Vec<ImageEval>> {
    cfg.validate()?;
    let k = gts.schema.len();
    if preds.num_keypoints != k || cfg.oks.kappas.len() != k {
        return Err(Error::Schema {
            expected: k,
            found: if preds.num_keypoints != k { preds.num_keypoints } else { cfg.oks.kappas.len() },
            context: "evaluation predictions".into(),
        });
    }
    let index = gts.index();
    let mut by_image: BTreeMap<u64, Vec<Pose>> = BTreeMap::new();
    for rec in &preds.records {
        if !index.contains_key(&rec.image_id) {
            return Err(Error::UnknownImage(rec.image_id));
        }
        by_image.entry(rec.image_id).or_default().extend(rec.instances.iter().map(|i| i.pose()));
    }
    let empty = Vec::new();
    Ok(gts
        .scenes
        .par_iter()
        .enumerate()
        .map(|(order, scene)| {
            let poses = by_image.get(&scene.image_id).unwrap_or(&empty);
            image_eval(order, scene, poses, cfg)
        })
        .collect())
}

fn image_eval(order: usize, scene: &SceneAnnotation, poses: &[Pose], cfg: &EvalConfig) -> ImageEval {
    let all_scores: Vec<f64> = poses.iter().map(|p| p.score).collect();
    let mut ranked = priority_order(&all_scores);
    ranked.truncate(cfg.max_detections);
    let sim = ranked
        .iter()
        .map(|&p| {
            scene
                .instances
                .iter()
                .map(|g| oks(&poses[p], &g.pose, cfg.oks.scale(&g.bbox, g.area), &cfg.oks).unwrap_or(0.0))
                .collect()
        })
        .collect();
    ImageEval {
        image_order: order,
        image_id: scene.image_id,
        scores: ranked.iter().map(|&p| all_scores[p]).collect(),
        ranked,
        sim,
        gt_ids: scene.instances.iter().map(|g| g.instance_id).collect(),
    }
}

/// `(score, image order, rank)` for every retained prediction, in global order.
fn global_order(images: &[&ImageEval]) -> Vec<(f64, usize, usize, usize)> {
    let mut all: Vec<(f64, usize, usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| im.scores.iter().enumerate().map(move |(r, &s)| (s, im.image_order, r, i)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all
}

/// AP from per-cutoff precision and recall.
pub fn envelope_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let n = precision.len();
    let mut env = precision.to_vec();
    for i in (0..n.saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..n {
        if recall[i] > prev_r {
            ap += (recall[i] - prev_r) * env[i];
            prev_r = recall[i];
        }
    }
    ap
}

fn curve(images: &[&ImageEval], order: &[(f64, usize, usize, usize)], threshold: f64, n_gts: usize) -> ThresholdResult {
    let tp_flags: Vec<Vec<bool>> = images
        .iter()
        .map(|im| {
            let ranks: Vec<f64> = (0..im.ranked.len()).map(|r| -(r as f64)).collect();
            let m = greedy_match(&ranks, &im.sim, im.gt_ids.len(), threshold);
            let mut tp = vec![false; im.ranked.len()];
            for &(p, _, _) in &m.pairs {
                tp[p] = true;
            }
            tp
        })
        .collect();
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (i, &(_, _, r, im)) in order.iter().enumerate() {
        if tp_flags[im][r] {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(if n_gts == 0 { 0.0 } else { tp as f64 / n_gts as f64 });
    }
    ThresholdResult {
        threshold,
        ap: envelope_ap(&precision, &recall),
        precision,
        recall,
    }
}

fn ap_over(images: &[&ImageEval], cfg: &EvalConfig) -> (f64, Vec<ThresholdResult>) {
    let n_gts: usize = images.iter().map(|im| im.gt_ids.len()).sum();
    let order = global_order(images);
    let per: Vec<ThresholdResult> = cfg.thresholds.iter().map(|&t| curve(images, &order, t, n_gts)).collect();
    let ap = per.iter().map(|t| t.ap).sum::<f64>() / per.len() as f64;
    (ap, per)
}

fn audit(images: &[ImageEval], threshold: f64) -> Vec<MatchAudit> {
    let mut out = Vec::new();
    for im in images {
        let ranks: Vec<f64> = (0..im.ranked.len()).map(|r| -(r as f64)).collect();
        let m = greedy_match(&ranks, &im.sim, im.gt_ids.len(), threshold);
        for (r, &p) in im.ranked.iter().enumerate() {
            let hit = m.gt_for_pred(r);
            out.push(MatchAudit {
                image_id: im.image_id,
                prediction: p,
                score: im.scores[r],
                gt_instance: hit.map(|(g, _)| im.gt_ids[g]),
                oks: hit.map_or_else(|| im.sim[r].iter().cloned().fold(0.0, f64::max), |(_, s)| s),
            });
        }
    }
    out
}

fn report(preds: &PredictionFile, gts: &Dataset, cfg: &EvalConfig, with_bands: bool) -> Result<EvalReport> {
    let images = prepare(preds, gts, cfg)?;
    let refs: Vec<&ImageEval> = images.iter().collect();
    let (ap, per_threshold) = ap_over(&refs, cfg);
    let mut bands = Vec::new();
    if with_bands {
        let names = band_names(cfg.num_bands());
        for (b, name) in names.into_iter().enumerate() {
            let members: Vec<&ImageEval> = images
                .iter()
                .filter(|im| cfg.band_of(gts.scenes[im.image_order].max_iou) == b)
                .collect();
            let lo = if b == 0 { 0.0 } else { cfg.band_boundaries[b - 1] };
            let hi = cfg.band_boundaries.get(b).copied().unwrap_or(1.0);
            let band_ap = (!members.is_empty()).then(|| ap_over(&members, cfg).0);
            bands.push(BandResult {
                name,
                range: [lo, hi],
                images: members.len(),
                ap: band_ap,
            });
        }
    }
    Ok(EvalReport {
        ap,
        num_images: images.len(),
        num_gts: images.iter().map(|im| im.gt_ids.len()).sum(),
        num_predictions: images.iter().map(|im| im.ranked.len()).sum(),
        per_threshold,
        bands,
        audit: audit(&images, cfg.thresholds[0]),
        config: serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
    })
}

fn band_names(n: usize) -> Vec<String> {
    if n == 3 {
        vec!["L".into(), "M".into(), "H".into()]
    } else {
        (0..n).map(|i| format!("band{i}")).collect()
    }
}

pub fn average_precision(preds: &PredictionFile, gts: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    report(preds, gts, cfg, false)
}

/// `average_precision` plus an independent AP per maxIoU band.
pub fn ap_by_crowding(preds: &PredictionFile, gts: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    report(preds, gts, cfg, true)
}

/// `(recall, precision)` after each ranked prediction at one OKS threshold.
pub fn precision_recall(preds: &PredictionFile, gts: &Dataset, threshold: f64, cfg: &EvalConfig) -> Result<Vec<(f64, f64)>> {
    let images = prepare(preds, gts, cfg)?;
    let refs: Vec<&ImageEval> = images.iter().collect();
    let n_gts = refs.iter().map(|im| im.gt_ids.len()).sum();
    let order = global_order(&refs);
    let c = curve(&refs, &order, threshold, n_gts);
    Ok(c.recall.into_iter().zip(c.precision).collect())
}
