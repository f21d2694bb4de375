//! Poses, boxes, crop transforms and overlap measures.
//!
//! Coordinates are continuous pixels with the convention that pixel `(col, row)`
//! covers `[col, col + 1) x [row, row + 1)`, so its center sits at `col + 0.5`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidence floor under which a predicted keypoint is ignored for box
/// derivation and condition rendering.
pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.1;

/// Side length given to boxes whose keypoints span (close to) zero extent.
pub const DEFAULT_MIN_SIDE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Ground truth: 0 unlabeled, 1 occluded, 2 visible. Predictions: confidence in `[0, 1]`.
    pub v: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: f64) -> Self {
        Self { x, y, v }
    }

    pub fn absent() -> Self {
        Self { x: 0.0, y: 0.0, v: 0.0 }
    }

    /// Whether this keypoint counts as present under the given floor.
    pub fn qualifies(&self, floor: f64) -> bool {
        self.v > 0.0 && self.v >= floor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: Vec<Keypoint>,
    pub instance_id: Option<u64>,
    pub score: f64,
}

impl Pose {
    pub fn new(keypoints: Vec<Keypoint>) -> Self {
        Self {
            keypoints,
            instance_id: None,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_instance(mut self, id: u64) -> Self {
        self.instance_id = Some(id);
        self
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn count_qualifying(&self, floor: f64) -> usize {
        self.keypoints.iter().filter(|k| k.qualifies(floor)).count()
    }

    /// Checks the length, finiteness and `[0, 1]` range invariants.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.keypoints.len() != k {
            return Err(Error::Schema {
                expected: k,
                found: self.keypoints.len(),
                context: "pose".into(),
            });
        }
        let bad = self
            .keypoints
            .iter()
            .any(|kp| !kp.x.is_finite() || !kp.y.is_finite() || !(0.0..=1.0).contains(&kp.v));
        if bad || !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Config(
                "pose has non-finite coordinates or confidence outside [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned box, top-left corner plus positive extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.right() >= other.right()
            && self.bottom() >= other.bottom()
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Knobs for deriving a crop box from a pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    /// Pixels added on all four sides (25 in the animal configuration, 5 in the human one).
    pub margin: f64,
    pub min_side: f64,
    pub confidence_floor: f64,
}

impl Default for BoxConfig {
    fn default() -> Self {
        Self {
            margin: 5.0,
            min_side: DEFAULT_MIN_SIDE,
            confidence_floor: DEFAULT_CONFIDENCE_FLOOR,
        }
    }
}

impl BoxConfig {
    pub fn with_margin(margin: f64) -> Self {
        Self {
            margin,
            ..Self::default()
        }
    }
}

/// Tight box over qualifying keypoints, widened to `min_side` where degenerate,
/// expanded by the margin and finally clipped to `image_bounds`.
pub fn bbox_from_pose(pose: &Pose, cfg: &BoxConfig, image_bounds: Option<&BBox>) -> Result<BBox> {
    let mut it = pose
        .keypoints
        .iter()
        .filter(|k| k.qualifies(cfg.confidence_floor));
    let first = it.next().ok_or(Error::NoVisibleKeypoints)?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
    for k in it {
        x0 = x0.min(k.x);
        y0 = y0.min(k.y);
        x1 = x1.max(k.x);
        y1 = y1.max(k.y);
    }
    let widen = |lo: f64, hi: f64| {
        if hi - lo < cfg.min_side {
            let c = 0.5 * (lo + hi);
            (c - 0.5 * cfg.min_side, c + 0.5 * cfg.min_side)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = widen(x0, x1);
    let (y0, y1) = widen(y0, y1);
    let m = cfg.margin;
    let b = BBox::new(x0 - m, y0 - m, x1 - x0 + 2.0 * m, y1 - y0 + 2.0 * m);
    if !b.is_valid() {
        return Err(Error::NoVisibleKeypoints);
    }
    match image_bounds {
        Some(bounds) => b.intersect(bounds).ok_or(Error::BoxOutsideImage),
        None => Ok(b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Grow the shorter side to the target aspect ratio, then scale.
    AspectExtend,
    /// Scale isotropically to fit and pad the remainder symmetrically.
    PadSquare,
}

/// Affine map from source-image coordinates to crop coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    /// Row-major 2x3 matrix `[a, b, tx; c, d, ty]`.
    pub affine: [[f64; 3]; 2],
    pub out_w: usize,
    pub out_h: usize,
    /// Padding in crop pixels: left, top, right, bottom.
    pub pad: [f64; 4],
}

impl CropTransform {
    pub fn identity(out_w: usize, out_h: usize) -> Self {
        Self {
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            out_w,
            out_h,
            pad: [0.0; 4],
        }
    }

    pub fn scale_x(&self) -> f64 {
        self.affine[0][0]
    }

    pub fn scale_y(&self) -> f64 {
        self.affine[1][1]
    }

    fn determinant(&self) -> f64 {
        let [[a, b, _], [c, d, _]] = self.affine;
        a * d - b * c
    }

    pub fn is_invertible(&self) -> bool {
        let det = self.determinant();
        det.is_finite() && det != 0.0
    }

    pub fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let [[a, b, tx], [c, d, ty]] = self.affine;
        (a * x + b * y + tx, c * x + d * y + ty)
    }

    pub fn inverse(&self, u: f64, v: f64) -> (f64, f64) {
        let [[a, b, tx], [c, d, ty]] = self.affine;
        let det = self.determinant();
        let (du, dv) = (u - tx, v - ty);
        ((d * du - b * dv) / det, (a * dv - c * du) / det)
    }

    pub fn contains_crop_point(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.out_w as f64 && v < self.out_h as f64
    }
}

pub fn fit_crop(bbox: &BBox, out_w: usize, out_h: usize, mode: CropMode) -> CropTransform {
    debug_assert!(bbox.is_valid() && out_w > 0 && out_h > 0);
    let (tw, th) = (out_w as f64, out_h as f64);
    match mode {
        CropMode::PadSquare => {
            let s = (tw / bbox.w).min(th / bbox.h);
            let px = 0.5 * (tw - bbox.w * s);
            let py = 0.5 * (th - bbox.h * s);
            CropTransform {
                affine: [[s, 0.0, px - s * bbox.x], [0.0, s, py - s * bbox.y]],
                out_w,
                out_h,
                pad: [px, py, px, py],
            }
        }
        CropMode::AspectExtend => {
            let aspect = tw / th;
            let (cx, cy) = bbox.center();
            let (w, h) = if bbox.w / bbox.h < aspect {
                (bbox.h * aspect, bbox.h)
            } else {
                (bbox.w, bbox.w / aspect)
            };
            let s = tw / w;
            let (x0, y0) = (cx - 0.5 * w, cy - 0.5 * h);
            CropTransform {
                affine: [[s, 0.0, -s * x0], [0.0, s, -s * y0]],
                out_w,
                out_h,
                pad: [0.0; 4],
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Maps every keypoint through `t`. In the forward direction keypoints that
/// leave the crop are zeroed out (`v = 0`) so losses can mask them.
pub fn map_pose(pose: &Pose, t: &CropTransform, direction: Direction) -> Pose {
    let keypoints = pose
        .keypoints
        .iter()
        .map(|k| match direction {
            Direction::Forward => {
                let (u, v) = t.forward(k.x, k.y);
                let vis = if t.contains_crop_point(u, v) { k.v } else { 0.0 };
                Keypoint::new(u, v, vis)
            }
            Direction::Inverse => {
                let (x, y) = t.inverse(k.x, k.y);
                Keypoint::new(x, y, k.v)
            }
        })
        .collect();
    Pose {
        keypoints,
        instance_id: pose.instance_id,
        score: pose.score,
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersect(b).map_or(0.0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Largest pairwise IoU among the boxes of one scene; 0 for fewer than two boxes.
pub fn max_iou(boxes: &[BBox]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in boxes.iter().enumerate() {
        for b in &boxes[i + 1..] {
            best = best.max(iou(a, b));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pose_of(points: &[(f64, f64, f64)]) -> Pose {
        Pose::new(points.iter().map(|&(x, y, v)| Keypoint::new(x, y, v)).collect())
    }

    #[test]
    fn box_from_spanning_keypoints() {
        let pose = pose_of(&[(10.0, 20.0, 1.0), (50.0, 60.0, 1.0), (30.0, 40.0, 1.0)]);
        let b = bbox_from_pose(&pose, &BoxConfig::with_margin(25.0), None).unwrap();
        assert_eq!(b, BBox::new(-15.0, -5.0, 90.0, 90.0));
    }

    #[test]
    fn degenerate_box_gets_min_side() {
        let pose = pose_of(&[(5.0, 5.0, 1.0)]);
        let cfg = BoxConfig {
            margin: 0.0,
            min_side: 8.0,
            confidence_floor: 0.1,
        };
        assert_eq!(bbox_from_pose(&pose, &cfg, None).unwrap(), BBox::new(1.0, 1.0, 8.0, 8.0));
    }

    #[test]
    fn low_confidence_keypoints_are_ignored() {
        let pose = pose_of(&[(0.0, 0.0, 0.05), (5.0, 5.0, 0.0)]);
        assert!(matches!(
            bbox_from_pose(&pose, &BoxConfig::default(), None),
            Err(Error::NoVisibleKeypoints)
        ));
    }

    #[test]
    fn clipping_happens_after_margin() {
        let pose = pose_of(&[(2.0, 2.0, 1.0), (20.0, 20.0, 1.0)]);
        let bounds = BBox::new(0.0, 0.0, 30.0, 30.0);
        let b = bbox_from_pose(&pose, &BoxConfig::with_margin(5.0), Some(&bounds)).unwrap();
        assert_eq!(b, BBox::new(0.0, 0.0, 25.0, 25.0));
        let far = pose_of(&[(100.0, 100.0, 1.0)]);
        assert!(matches!(
            bbox_from_pose(&far, &BoxConfig::with_margin(5.0), Some(&bounds)),
            Err(Error::BoxOutsideImage)
        ));
    }

    #[test]
    fn pad_square_examples() {
        let t = fit_crop(&BBox::new(0.0, 0.0, 100.0, 100.0), 256, 256, CropMode::PadSquare);
        assert_abs_diff_eq!(t.scale_x(), 2.56, epsilon = 1e-12);
        assert_eq!(t.pad, [0.0; 4]);

        let t = fit_crop(&BBox::new(0.0, 0.0, 100.0, 50.0), 256, 256, CropMode::PadSquare);
        assert_abs_diff_eq!(t.scale_x(), 2.56, epsilon = 1e-12);
        assert_abs_diff_eq!(t.pad[1], 64.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.pad[3], 64.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.pad[0], 0.0, epsilon = 1e-9);
        // box corners land on the padded content edges
        let (u, v) = t.forward(0.0, 0.0);
        assert_abs_diff_eq!(u, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 64.0, epsilon = 1e-9);
    }

    #[test]
    fn aspect_extend_example() {
        let t = fit_crop(&BBox::new(0.0, 0.0, 100.0, 100.0), 256, 192, CropMode::AspectExtend);
        assert_abs_diff_eq!(t.scale_x(), 1.92, epsilon = 1e-12);
        assert_abs_diff_eq!(t.scale_y(), 1.92, epsilon = 1e-12);
        // extended width of 133.33 centered on the box
        let (x0, _) = t.inverse(0.0, 0.0);
        let (x1, _) = t.inverse(256.0, 0.0);
        assert_abs_diff_eq!(x1 - x0, 400.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(x0, -50.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn identity_map_and_out_of_crop_masking() {
        let pose = pose_of(&[(3.0, 4.0, 1.0), (10.0, 11.0, 0.5)]);
        let id = CropTransform::identity(64, 64);
        assert_eq!(map_pose(&pose, &id, Direction::Forward), pose);

        let t = fit_crop(&BBox::new(0.0, 0.0, 64.0, 64.0), 64, 64, CropMode::PadSquare);
        let out = map_pose(&pose_of(&[(-10.0, 5.0, 1.0)]), &t, Direction::Forward);
        assert_eq!(out.keypoints[0].v, 0.0);
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert_abs_diff_eq!(iou(&a, &BBox::new(1.0, 0.0, 2.0, 2.0)), 2.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn max_iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(max_iou(&[a]), 0.0);
        assert_eq!(max_iou(&[a, a]), 1.0);
    }

    #[test]
    fn max_iou_picks_largest_of_three() {
        // widths chosen so the pairwise IoUs are exactly {0.1, 0.4, 0.0}
        let a = BBox::new(0.0, 0.0, 10.0, 1.0);
        let b = BBox::new(0.0, 0.0, 4.0, 1.0); // iou(a,b) = 0.4
        let c = BBox::new(9.0, 0.0, 1.0, 1.0); // iou(a,c) = 0.1, iou(b,c) = 0
        assert_abs_diff_eq!(iou(&a, &b), 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(iou(&a, &c), 0.1, epsilon = 1e-15);
        assert_eq!(iou(&b, &c), 0.0);
        assert_abs_diff_eq!(max_iou(&[a, b, c]), 0.4, epsilon = 1e-15);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64, 0.2..1.0f64), 1..8)
            .prop_map(|pts| pose_of(&pts))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn larger_margin_contains_smaller(pose in arb_pose(), m in 0.0..30.0f64, dm in 0.0..30.0f64) {
            let small = bbox_from_pose(&pose, &BoxConfig::with_margin(m), None).unwrap();
            let large = bbox_from_pose(&pose, &BoxConfig::with_margin(m + dm), None).unwrap();
            prop_assert!(large.contains(&small));
        }

        #[test]
        fn crop_round_trip(b in arb_box(), pose in arb_pose(), square in any::<bool>()) {
            let mode = if square { CropMode::PadSquare } else { CropMode::AspectExtend };
            let t = fit_crop(&b, 64, 48, mode);
            prop_assert!(t.is_invertible());
            let fwd = map_pose(&pose, &t, Direction::Forward);
            let back = map_pose(&fwd, &t, Direction::Inverse);
            for (orig, (f, r)) in pose.keypoints.iter().zip(fwd.keypoints.iter().zip(&back.keypoints)) {
                if f.v > 0.0 {
                    prop_assert!((orig.x - r.x).abs() <= 1e-9 * (1.0 + orig.x.abs()));
                    prop_assert!((orig.y - r.y).abs() <= 1e-9 * (1.0 + orig.y.abs()));
                }
            }
        }

        #[test]
        fn pad_square_is_isotropic(b in arb_box(), w in 8usize..300, h in 8usize..300) {
            let t = fit_crop(&b, w, h, CropMode::PadSquare);
            prop_assert_eq!(t.scale_x(), t.scale_y());
        }
    }
}
