use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keypoint layout shared by annotations, predictions and models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointSchema {
    pub name: String,
    pub keypoints: Vec<String>,
    /// Left/right counterparts; may be empty for bodies without a mirror symmetry.
    pub flip_pairs: Vec<[usize; 2]>,
    pub skeleton: Vec<[usize; 2]>,
    /// Per-keypoint OKS falloff constants.
    pub kappas: Vec<f64>,
}

/// Uniform falloff used for the synthetic and animal schemas.
pub const UNIFORM_KAPPA: f64 = 0.08;

const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

impl KeypointSchema {
    /// Articulated stick figure used by the synthetic generator.
    pub fn stick11() -> Self {
        let names = [
            "head", "neck", "l_elbow", "l_hand", "r_elbow", "r_hand", "hip", "l_knee", "l_foot",
            "r_knee", "r_foot",
        ];
        Self {
            name: "stick11".into(),
            keypoints: names.iter().map(|s| s.to_string()).collect(),
            flip_pairs: vec![[2, 4], [3, 5], [7, 9], [8, 10]],
            skeleton: vec![
                [0, 1],
                [1, 2],
                [2, 3],
                [1, 4],
                [4, 5],
                [1, 6],
                [6, 7],
                [7, 8],
                [6, 9],
                [9, 10],
            ],
            kappas: vec![UNIFORM_KAPPA; names.len()],
        }
    }

    /// The 17-keypoint COCO human layout. COCO stores per-keypoint sigmas and
    /// uses `(2 sigma)^2` in the OKS exponent, so the falloff here is `2 sigma`.
    pub fn coco17() -> Self {
        let names = [
            "nose",
            "left_eye",
            "right_eye",
            "left_ear",
            "right_ear",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
            "left_hip",
            "right_hip",
            "left_knee",
            "right_knee",
            "left_ankle",
            "right_ankle",
        ];
        Self {
            name: "coco17".into(),
            keypoints: names.iter().map(|s| s.to_string()).collect(),
            flip_pairs: vec![[1, 2], [3, 4], [5, 6], [7, 8], [9, 10], [11, 12], [13, 14], [15, 16]],
            skeleton: vec![
                [15, 13],
                [13, 11],
                [16, 14],
                [14, 12],
                [11, 12],
                [5, 11],
                [6, 12],
                [5, 6],
                [5, 7],
                [6, 8],
                [7, 9],
                [8, 10],
                [1, 2],
                [0, 1],
                [0, 2],
                [1, 3],
                [2, 4],
                [3, 5],
                [4, 6],
            ],
            kappas: COCO_SIGMAS.iter().map(|s| 2.0 * s).collect(),
        }
    }

    /// A schema of `k` keypoints without mirror pairs (fish-like bodies).
    pub fn chain(k: usize) -> Self {
        Self {
            name: format!("chain{k}"),
            keypoints: (0..k).map(|i| format!("kp{i}")).collect(),
            flip_pairs: Vec::new(),
            skeleton: (1..k).map(|i| [i - 1, i]).collect(),
            kappas: vec![UNIFORM_KAPPA; k],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "stick11" => Ok(Self::stick11()),
            "coco17" => Ok(Self::coco17()),
            other => other
                .strip_prefix("chain")
                .and_then(|n| n.parse().ok())
                .filter(|&k: &usize| k >= 2)
                .map(Self::chain)
                .ok_or_else(|| Error::Config(format!("unknown keypoint schema `{other}`"))),
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn counterpart(&self, k: usize) -> Option<usize> {
        self.flip_pairs.iter().find_map(|&[a, b]| {
            if a == k {
                Some(b)
            } else if b == k {
                Some(a)
            } else {
                None
            }
        })
    }

    /// Whether keypoint `k` sits on the left side of the body.
    pub fn is_left(&self, k: usize) -> bool {
        self.flip_pairs.iter().any(|&[a, _]| a == k)
    }

    pub fn is_right(&self, k: usize) -> bool {
        self.flip_pairs.iter().any(|&[_, b]| b == k)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.len();
        if k < 2 {
            return Err(Error::Config("schema needs at least two keypoints".into()));
        }
        if self.kappas.len() != k || self.kappas.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::Config("schema kappas must be positive, one per keypoint".into()));
        }
        let in_range = |pairs: &[[usize; 2]]| pairs.iter().all(|p| p[0] < k && p[1] < k);
        if !in_range(&self.flip_pairs) || !in_range(&self.skeleton) {
            return Err(Error::Config("schema pair index out of range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for s in [KeypointSchema::stick11(), KeypointSchema::coco17(), KeypointSchema::chain(5)] {
            s.validate().unwrap();
        }
        assert_eq!(KeypointSchema::by_name("chain5").unwrap().len(), 5);
        assert!(KeypointSchema::by_name("nope").is_err());
    }

    #[test]
    fn counterparts_are_symmetric() {
        let s = KeypointSchema::stick11();
        for k in 0..s.len() {
            if let Some(c) = s.counterpart(k) {
                assert_eq!(s.counterpart(c), Some(k));
            }
        }
        assert_eq!(s.counterpart(0), None);
        assert!(s.is_left(3) && s.is_right(5));
    }
}
