//! Gaussian heatmap targets, decoding and the masked MSE loss.
//!
//! Cell `(row, col)` of a stride-`s` heatmap is centered on input pixel
//! coordinate `((col + 0.5) s, (row + 0.5) s)`.

use crate::error::{Error, Result};
use crate::geometry::{CropTransform, Keypoint, Pose};

/// Target spread in heatmap cells.
pub const TARGET_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointHeatmaps {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Input pixels per heatmap cell.
    pub stride: f64,
    pub data: Vec<f64>,
}

impl KeypointHeatmaps {
    pub fn zeros(channels: usize, height: usize, width: usize, stride: f64) -> Self {
        Self {
            channels,
            height,
            width,
            stride,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Renders one Gaussian per keypoint (in input pixels) into a `K x h x w` map.
/// Keypoints with `v <= 0` leave their channel at zero.
pub fn heatmap_targets(pose: &Pose, height: usize, width: usize, stride: f64, sigma: f64) -> KeypointHeatmaps {
    let mut hm = KeypointHeatmaps::zeros(pose.len(), height, width, stride);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let plane = height * width;
    for (k, kp) in pose.keypoints.iter().enumerate() {
        if kp.v <= 0.0 {
            continue;
        }
        let (u, w) = (kp.x / stride - 0.5, kp.y / stride - 0.5);
        let ch = &mut hm.data[k * plane..(k + 1) * plane];
        for row in 0..height {
            let dy = row as f64 - w;
            for col in 0..width {
                let dx = col as f64 - u;
                ch[row * width + col] = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    hm
}

/// First argmax of a plane (lowest linear index wins ties).
pub fn argmax(plane: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    best
}

/// Sub-cell position of a peak in cell units: a quarter cell toward the
/// larger horizontal and vertical neighbour.
pub fn refine_peak(plane: &[f64], height: usize, width: usize, row: usize, col: usize) -> (f64, f64) {
    let at = |r: usize, c: usize| plane[r * width + c];
    let mut x = col as f64;
    let mut y = row as f64;
    if col > 0 && col + 1 < width {
        let (l, r) = (at(row, col - 1), at(row, col + 1));
        if r > l {
            x += 0.25;
        } else if l > r {
            x -= 0.25;
        }
    }
    if row > 0 && row + 1 < height {
        let (u, d) = (at(row - 1, col), at(row + 1, col));
        if d > u {
            y += 0.25;
        } else if u > d {
            y -= 0.25;
        }
    }
    (x, y)
}

/// Cell coordinates to input pixels.
pub fn cell_to_pixel(cx: f64, cy: f64, stride: f64) -> (f64, f64) {
    ((cx + 0.5) * stride, (cy + 0.5) * stride)
}

/// Per-keypoint argmax decode, mapped back through the inverse crop transform.
pub fn decode_heatmaps(hm: &KeypointHeatmaps, t: &CropTransform) -> Pose {
    let mut keypoints = Vec::with_capacity(hm.channels);
    for c in 0..hm.channels {
        let plane = hm.channel(c);
        let i = argmax(plane);
        let (row, col) = (i / hm.width, i % hm.width);
        let (cx, cy) = refine_peak(plane, hm.height, hm.width, row, col);
        let (px, py) = cell_to_pixel(cx, cy, hm.stride);
        let (x, y) = t.inverse(px, py);
        keypoints.push(Keypoint::new(x, y, plane[i].clamp(0.0, 1.0)));
    }
    let score = if keypoints.is_empty() {
        0.0
    } else {
        keypoints.iter().map(|k| k.v).sum::<f64>() / keypoints.len() as f64
    };
    Pose::new(keypoints).with_score(score)
}

/// Mean squared error over the channels whose mask is true.
pub fn heatmap_loss(pred: &KeypointHeatmaps, target: &KeypointHeatmaps, mask: &[bool]) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(&pred.shape(), &target.shape(), "heatmap loss"));
    }
    if mask.len() != pred.channels {
        return Err(Error::shape(&[mask.len()], &[pred.channels], "heatmap loss mask"));
    }
    let n_on = mask.iter().filter(|&&m| m).count();
    if n_on == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (c, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (p, t) in pred.channel(c).iter().zip(target.channel(c)) {
            sum += (p - t) * (p - t);
        }
    }
    Ok(sum / (n_on * pred.height * pred.width) as f64)
}

/// Element weights and normalizer matching `heatmap_loss`, for the tape's
/// weighted squared-error node.
pub fn loss_weights(mask: &[bool], height: usize, width: usize) -> (Vec<f64>, f64) {
    let plane = height * width;
    let mut w = Vec::with_capacity(mask.len() * plane);
    for &m in mask {
        w.extend(std::iter::repeat_n(if m { 1.0 } else { 0.0 }, plane));
    }
    let n_on = mask.iter().filter(|&&m| m).count().max(1);
    (w, (n_on * plane) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_decodes_to_cell_center() {
        let mut hm = KeypointHeatmaps::zeros(1, 8, 8, 4.0);
        hm.data[3 * 8 + 2] = 1.0;
        let p = decode_heatmaps(&hm, &CropTransform::identity(32, 32));
        assert_eq!((p.keypoints[0].x, p.keypoints[0].y), (10.0, 14.0));
        assert_eq!(p.keypoints[0].v, 1.0);
    }

    #[test]
    fn quarter_shift_toward_larger_neighbour() {
        let mut hm = KeypointHeatmaps::zeros(1, 8, 8, 4.0);
        hm.data[3 * 8 + 2] = 0.7;
        hm.data[3 * 8 + 3] = 0.5;
        hm.data[2 * 8 + 2] = 0.2;
        let p = decode_heatmaps(&hm, &CropTransform::identity(32, 32));
        assert_eq!(p.keypoints[0].x, 11.0);
        assert_eq!(p.keypoints[0].y, 13.0);
        assert_eq!(p.keypoints[0].v, 0.7);
        assert_eq!(p.score, 0.7);
    }

    #[test]
    fn flat_heatmap_takes_first_index() {
        let hm = KeypointHeatmaps {
            channels: 1,
            height: 4,
            width: 4,
            stride: 4.0,
            data: vec![0.3; 16],
        };
        let p = decode_heatmaps(&hm, &CropTransform::identity(16, 16));
        assert_eq!((p.keypoints[0].x, p.keypoints[0].y), (2.0, 2.0));
    }

    #[test]
    fn target_peak_decodes_back() {
        let pose = Pose::new(vec![Keypoint::new(22.0, 38.0, 1.0), Keypoint::new(5.0, 5.0, 0.0)]);
        let hm = heatmap_targets(&pose, 16, 16, 4.0, TARGET_SIGMA);
        assert!(hm.channel(1).iter().all(|&v| v == 0.0));
        let p = decode_heatmaps(&hm, &CropTransform::identity(64, 64));
        assert!((p.keypoints[0].x - 22.0).abs() <= 1.0);
        assert!((p.keypoints[0].y - 38.0).abs() <= 1.0);
    }

    #[test]
    fn loss_conventions() {
        let k = 4;
        let t = heatmap_targets(
            &Pose::new(vec![Keypoint::new(10.0, 10.0, 1.0); k]),
            8,
            8,
            4.0,
            TARGET_SIGMA,
        );
        assert_eq!(heatmap_loss(&t, &t, &[true; 4]).unwrap(), 0.0);
        let mut p = t.clone();
        for v in &mut p.data[64..128] {
            *v += 0.1;
        }
        let l = heatmap_loss(&p, &t, &[true; 4]).unwrap();
        assert!((l - 0.01 / k as f64).abs() < 1e-12);
        assert_eq!(heatmap_loss(&p, &t, &[false; 4]).unwrap(), 0.0);
        let other = KeypointHeatmaps::zeros(4, 8, 9, 4.0);
        assert!(matches!(heatmap_loss(&p, &other, &[true; 4]), Err(Error::Shape { .. })));
    }
}
