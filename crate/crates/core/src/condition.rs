//! Rendering of proposal poses into condition heatmaps.
//!
//! Every qualifying keypoint contributes a Gaussian bump whose sampled maximum is
//! exactly 1. The bump is evaluated at pixel centers and divided by its value at
//! the pixel center closest to the keypoint, so a keypoint sitting on a pixel
//! center yields the plain `exp(-d^2 / (2 sigma^2))` profile and an off-center
//! keypoint still keeps its sub-pixel location in the bump shape. Overlapping
//! bumps are composited with a per-pixel maximum.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{Pose, DEFAULT_CONFIDENCE_FLOOR};
use crate::image::Image;

pub const DEFAULT_SIGMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Color,
    Gray,
    Kchannel,
}

impl Encoding {
    pub fn channels(&self, num_keypoints: usize) -> usize {
        match self {
            Encoding::Color => 3,
            Encoding::Gray => 1,
            Encoding::Kchannel => num_keypoints,
        }
    }
}

impl std::str::FromStr for Encoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "color" => Ok(Encoding::Color),
            "gray" => Ok(Encoding::Gray),
            "kchannel" => Ok(Encoding::Kchannel),
            _ => Err(format!("unknown condition encoding `{s}`")),
        }
    }
}

/// One RGB triple per keypoint, hues evenly spaced around the color wheel.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointPalette {
    pub colors: Vec<[f64; 3]>,
}

impl KeypointPalette {
    pub fn evenly_spaced(k: usize) -> Self {
        let colors = (0..k).map(|i| hsv_to_rgb(i as f64 / k as f64)).collect();
        Self { colors }
    }
}

/// Full saturation and value; `hue` in `[0, 1)`.
fn hsv_to_rgb(hue: f64) -> [f64; 3] {
    let h = hue * 6.0;
    let sector = h.floor() as i32 % 6;
    let f = h - h.floor();
    let (q, t) = (1.0 - f, f);
    match sector {
        0 => [1.0, t, 0.0],
        1 => [q, 1.0, 0.0],
        2 => [0.0, 1.0, t],
        3 => [0.0, q, 1.0],
        4 => [t, 0.0, 1.0],
        _ => [1.0, 0.0, q],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionHeatmap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub encoding: Encoding,
    pub sigma: f64,
}

impl ConditionHeatmap {
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }

    /// Writes a lossless preview; K-channel maps are collapsed by maximum.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let img = match self.encoding {
            Encoding::Color | Encoding::Gray => Image {
                channels: self.channels,
                height: h,
                width: w,
                data: self.data.iter().map(|&v| v as f32).collect(),
            },
            Encoding::Kchannel => {
                let mut data = vec![0.0f32; plane];
                for c in 0..self.channels {
                    for (d, &v) in data.iter_mut().zip(&self.data[c * plane..(c + 1) * plane]) {
                        *d = d.max(v as f32);
                    }
                }
                Image {
                    channels: 1,
                    height: h,
                    width: w,
                    data,
                }
            }
        };
        img.save_png(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    pub encoding: Encoding,
    pub sigma: f64,
    pub confidence_floor: f64,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            encoding: Encoding::Color,
            sigma: DEFAULT_SIGMA,
            confidence_floor: DEFAULT_CONFIDENCE_FLOOR,
        }
    }
}

/// Renders `pose` (already in crop coordinates) into a `channels x height x width` map.
pub fn render_condition(
    pose: &Pose,
    height: usize,
    width: usize,
    cfg: &ConditionConfig,
    palette: &KeypointPalette,
) -> ConditionHeatmap {
    let k = pose.len();
    let channels = cfg.encoding.channels(k);
    let plane = height * width;
    let mut data = vec![0.0; channels * plane];
    let inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let mut bump = vec![0.0; plane];

    for (ki, kp) in pose.keypoints.iter().enumerate() {
        if !kp.qualifies(cfg.confidence_floor) {
            continue;
        }
        if !(kp.x >= 0.0 && kp.y >= 0.0 && kp.x < width as f64 && kp.y < height as f64) {
            continue;
        }
        let nx = kp.x.floor() + 0.5 - kp.x;
        let ny = kp.y.floor() + 0.5 - kp.y;
        let d_min2 = nx * nx + ny * ny;
        for row in 0..height {
            let dy = row as f64 + 0.5 - kp.y;
            for col in 0..width {
                let dx = col as f64 + 0.5 - kp.x;
                bump[row * width + col] = (-(dx * dx + dy * dy - d_min2) * inv).exp().min(1.0);
            }
        }
        match cfg.encoding {
            Encoding::Gray => max_into(&mut data, &bump, 1.0),
            Encoding::Kchannel => max_into(&mut data[ki * plane..(ki + 1) * plane], &bump, 1.0),
            Encoding::Color => {
                let rgb = palette.colors[ki];
                for (c, &weight) in rgb.iter().enumerate() {
                    max_into(&mut data[c * plane..(c + 1) * plane], &bump, weight);
                }
            }
        }
    }

    ConditionHeatmap {
        channels,
        height,
        width,
        data,
        encoding: cfg.encoding,
        sigma: cfg.sigma,
    }
}

fn max_into(dst: &mut [f64], bump: &[f64], weight: f64) {
    if weight == 0.0 {
        return;
    }
    for (d, &b) in dst.iter_mut().zip(bump) {
        *d = d.max(b * weight);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Keypoint;
    use proptest::prelude::*;

    fn cfg(encoding: Encoding, sigma: f64) -> ConditionConfig {
        ConditionConfig {
            encoding,
            sigma,
            confidence_floor: 0.1,
        }
    }

    #[test]
    fn empty_pose_renders_zeros() {
        let pose = Pose::new(vec![Keypoint::absent(); 4]);
        let hm = render_condition(&pose, 16, 16, &cfg(Encoding::Color, 2.0), &KeypointPalette::evenly_spaced(4));
        assert!(hm.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn below_floor_is_not_rendered() {
        let pose = Pose::new(vec![Keypoint::new(5.5, 5.5, 0.05)]);
        let hm = render_condition(&pose, 16, 16, &cfg(Encoding::Gray, 2.0), &KeypointPalette::evenly_spaced(1));
        assert_eq!(hm.max_value(), 0.0);
    }

    #[test]
    fn gray_bump_closed_form() {
        let sigma = 2.0;
        let pose = Pose::new(vec![Keypoint::new(8.5, 6.5, 1.0)]);
        let hm = render_condition(&pose, 16, 20, &cfg(Encoding::Gray, sigma), &KeypointPalette::evenly_spaced(1));
        assert_eq!(hm.get(0, 6, 8), 1.0);
        for (row, col) in [(6usize, 11usize), (9, 8), (2, 3), (15, 19)] {
            let dx = col as f64 - 8.0;
            let dy = row as f64 - 6.0;
            let expected = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            assert!((hm.get(0, row, col) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn palette_is_distinct_and_saturated() {
        for k in [1usize, 3, 11, 17] {
            let p = KeypointPalette::evenly_spaced(k);
            for (i, a) in p.colors.iter().enumerate() {
                assert_eq!(a.iter().cloned().fold(0.0, f64::max), 1.0);
                for b in &p.colors[i + 1..] {
                    assert_ne!(a, b);
                }
            }
        }
    }

    #[test]
    fn channel_counts() {
        let pose = Pose::new(vec![Keypoint::new(3.0, 3.0, 1.0); 5]);
        let pal = KeypointPalette::evenly_spaced(5);
        for (enc, c) in [(Encoding::Color, 3), (Encoding::Gray, 1), (Encoding::Kchannel, 5)] {
            assert_eq!(render_condition(&pose, 8, 8, &cfg(enc, 2.0), &pal).channels, c);
        }
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        prop::collection::vec((0.0..32.0f64, 0.0..24.0f64, 0.0..1.0f64), 1..9).prop_map(|pts| {
            Pose::new(pts.into_iter().map(|(x, y, v)| Keypoint::new(x, y, v)).collect())
        })
    }

    proptest! {
        #[test]
        fn gray_equals_channel_max_of_kchannel(pose in arb_pose(), sigma in 0.8..4.0f64) {
            let pal = KeypointPalette::evenly_spaced(pose.len());
            let gray = render_condition(&pose, 24, 32, &cfg(Encoding::Gray, sigma), &pal);
            let kch = render_condition(&pose, 24, 32, &cfg(Encoding::Kchannel, sigma), &pal);
            let plane = 24 * 32;
            for i in 0..plane {
                let m = (0..pose.len()).map(|c| kch.data[c * plane + i]).fold(0.0, f64::max);
                prop_assert!((gray.data[i] - m).abs() <= 1e-12);
            }
        }

        #[test]
        fn peak_is_one_when_anything_renders(pose in arb_pose(), color in any::<bool>()) {
            let enc = if color { Encoding::Color } else { Encoding::Gray };
            let pal = KeypointPalette::evenly_spaced(pose.len());
            let hm = render_condition(&pose, 24, 32, &cfg(enc, 2.0), &pal);
            prop_assert!(hm.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            if pose.count_qualifying(0.1) > 0 {
                prop_assert_eq!(hm.max_value(), 1.0);
            } else {
                prop_assert_eq!(hm.max_value(), 0.0);
            }
        }

        #[test]
        fn far_pixels_are_negligible(pose in arb_pose(), sigma in 2.0..3.0f64) {
            let pal = KeypointPalette::evenly_spaced(pose.len());
            let hm = render_condition(&pose, 24, 32, &cfg(Encoding::Gray, sigma), &pal);
            for row in 0..24 {
                for col in 0..32 {
                    let far = pose.keypoints.iter().filter(|k| k.qualifies(0.1)).all(|k| {
                        let dx = col as f64 + 0.5 - k.x;
                        let dy = row as f64 + 0.5 - k.y;
                        (dx * dx + dy * dy).sqrt() > 5.0 * sigma
                    });
                    if far {
                        prop_assert!(hm.get(0, row, col) < 4e-6);
                    }
                }
            }
        }
    }
}
