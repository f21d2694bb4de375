//! Decoding of the bottom-up head: center peaks plus center-to-keypoint offsets,
//! snapped to nearby keypoint heatmap maxima.

use serde::{Deserialize, Serialize};

use super::heatmap::{cell_to_pixel, refine_peak};
use crate::geometry::{Keypoint, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuDecodeConfig {
    /// Minimum center heatmap value for an instance.
    pub center_threshold: f64,
    /// Centers within this distance (cells) of a stronger kept center are suppressed.
    pub nms_radius: f64,
    /// Search radius (cells) for snapping an offset prediction onto a keypoint peak.
    pub snap_radius: f64,
    /// Keypoint heatmap peaks below this value are not snap targets.
    pub peak_floor: f64,
    pub max_instances: usize,
}

impl Default for BuDecodeConfig {
    fn default() -> Self {
        Self {
            center_threshold: 0.3,
            nms_radius: 2.0,
            snap_radius: 1.5,
            peak_floor: 0.05,
            max_instances: 20,
        }
    }
}

/// Raw bottom-up maps: `K` keypoint heatmaps, one center heatmap and `2K`
/// offset planes (`dx_k, dy_k` pairs, in cells).
#[derive(Debug, Clone, PartialEq)]
pub struct BuMaps {
    pub num_keypoints: usize,
    pub height: usize,
    pub width: usize,
    pub stride: f64,
    pub data: Vec<f64>,
}

impl BuMaps {
    pub fn zeros(num_keypoints: usize, height: usize, width: usize, stride: f64) -> Self {
        Self {
            num_keypoints,
            height,
            width,
            stride,
            data: vec![0.0; (3 * num_keypoints + 1) * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        3 * self.num_keypoints + 1
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.height * self.width;
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn keypoint_channel(&self, k: usize) -> usize {
        k
    }

    pub fn center_channel(&self) -> usize {
        self.num_keypoints
    }

    pub fn offset_channels(&self, k: usize) -> (usize, usize) {
        let base = self.num_keypoints + 1 + 2 * k;
        (base, base + 1)
    }
}

/// Cells that are `>=` all 8 neighbours and `>= floor`, as `(row, col, value)`.
pub fn local_maxima(plane: &[f64], height: usize, width: usize, floor: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for r in 0..height {
        for c in 0..width {
            let v = plane[r * width + c];
            if v < floor {
                continue;
            }
            let mut is_max = true;
            'n: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= height as i64 || cc >= width as i64 {
                        continue;
                    }
                    if plane[rr as usize * width + cc as usize] > v {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                out.push((r, c, v));
            }
        }
    }
    out
}

/// Decodes instance poses (in input pixels) from bottom-up maps.
pub fn decode_bu(maps: &BuMaps, cfg: &BuDecodeConfig) -> Vec<Pose> {
    let (h, w) = (maps.height, maps.width);
    let k = maps.num_keypoints;
    let center = maps.plane(maps.center_channel());

    let mut peaks = local_maxima(center, h, w, cfg.center_threshold);
    // strongest first, ties by raster order
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for p in peaks {
        let close = kept.iter().any(|q| {
            let (dr, dc) = (p.0 as f64 - q.0 as f64, p.1 as f64 - q.1 as f64);
            (dr * dr + dc * dc).sqrt() <= cfg.nms_radius
        });
        if !close {
            kept.push(p);
            if kept.len() == cfg.max_instances {
                break;
            }
        }
    }

    let kp_peaks: Vec<Vec<(usize, usize, f64)>> = (0..k)
        .map(|j| local_maxima(maps.plane(maps.keypoint_channel(j)), h, w, cfg.peak_floor))
        .collect();

    kept.into_iter()
        .map(|(r, c, score)| {
            let idx = r * w + c;
            let keypoints = (0..k)
                .map(|j| {
                    let (ox, oy) = maps.offset_channels(j);
                    let px = c as f64 + maps.plane(ox)[idx];
                    let py = r as f64 + maps.plane(oy)[idx];
                    let heat = maps.plane(maps.keypoint_channel(j));
                    let snap = kp_peaks[j]
                        .iter()
                        .map(|&(pr, pc, v)| {
                            let d = ((pc as f64 - px).powi(2) + (pr as f64 - py).powi(2)).sqrt();
                            (d, pr, pc, v)
                        })
                        .filter(|t| t.0 <= cfg.snap_radius)
                        .min_by(|a, b| a.0.total_cmp(&b.0));
                    let (cx, cy, conf) = match snap {
                        Some((_, pr, pc, v)) => {
                            let (cx, cy) = refine_peak(heat, h, w, pr, pc);
                            (cx, cy, v)
                        }
                        None => {
                            let rr = py.round().clamp(0.0, (h - 1) as f64) as usize;
                            let cc = px.round().clamp(0.0, (w - 1) as f64) as usize;
                            (px, py, heat[rr * w + cc])
                        }
                    };
                    let (x, y) = cell_to_pixel(cx, cy, maps.stride);
                    Keypoint::new(x, y, conf.clamp(0.0, 1.0))
                })
                .collect();
            Pose::new(keypoints).with_score(score.clamp(0.0, 1.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CENTER: usize = usize::MAX;

    fn plant(maps: &mut BuMaps, ch: usize, r: usize, c: usize, v: f64) {
        let w = maps.width;
        let ch = if ch == CENTER { maps.center_channel() } else { ch };
        maps.plane_mut(ch)[r * w + c] = v;
    }

    #[test]
    fn single_center_gives_one_pose() {
        let mut m = BuMaps::zeros(2, 12, 12, 4.0);
        plant(&mut m, CENTER, 5, 5, 0.9);
        let (ox, oy) = m.offset_channels(1);
        plant(&mut m, ox, 5, 5, 2.0);
        plant(&mut m, oy, 5, 5, -1.0);
        plant(&mut m, 1, 4, 7, 0.8);
        let poses = decode_bu(&m, &BuDecodeConfig::default());
        assert_eq!(poses.len(), 1);
        assert_eq!(poses[0].score, 0.9);
        let kp = poses[0].keypoints[1];
        assert_eq!((kp.x, kp.y, kp.v), (30.0, 18.0, 0.8));
        // no snap target: raw offset position, heat value there
        let kp0 = poses[0].keypoints[0];
        assert_eq!((kp0.x, kp0.y, kp0.v), (22.0, 22.0, 0.0));
    }

    #[test]
    fn close_centers_are_suppressed() {
        let mut m = BuMaps::zeros(1, 12, 12, 4.0);
        plant(&mut m, CENTER, 5, 5, 0.6);
        plant(&mut m, CENTER, 5, 7, 0.8);
        plant(&mut m, CENTER, 10, 1, 0.5);
        let poses = decode_bu(&m, &BuDecodeConfig::default());
        let scores: Vec<f64> = poses.iter().map(|p| p.score).collect();
        assert_eq!(scores, vec![0.8, 0.5]);
    }

    #[test]
    fn threshold_is_respected() {
        let mut m = BuMaps::zeros(1, 8, 8, 4.0);
        plant(&mut m, CENTER, 3, 3, 0.29);
        assert!(decode_bu(&m, &BuDecodeConfig::default()).is_empty());
        let cfg = BuDecodeConfig {
            center_threshold: 0.2,
            ..Default::default()
        };
        assert_eq!(decode_bu(&m, &cfg).len(), 1);
    }
}
