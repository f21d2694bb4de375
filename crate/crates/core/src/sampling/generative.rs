//! Synthetic pose errors injected into ground truth to produce training conditions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Keypoint, Pose};
use crate::io::SceneAnnotation;
use crate::schema::KeypointSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissMode {
    /// Move the keypoint by a uniform offset from `miss_offset_range`.
    Displace,
    /// Mark the keypoint absent.
    Drop,
}

/// A probability that depends on keypoint validity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByValidity {
    /// Labeled and not occluded.
    pub valid: f64,
    /// Occluded (or otherwise unreliable) keypoints.
    pub invalid: f64,
}

impl ByValidity {
    pub const fn new(valid: f64, invalid: f64) -> Self {
        Self { valid, invalid }
    }

    pub fn get(&self, valid: bool) -> f64 {
        if valid {
            self.valid
        } else {
            self.invalid
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorDistribution {
    pub p_jitter: ByValidity,
    pub p_miss: ByValidity,
    pub p_inversion: ByValidity,
    pub p_swap: ByValidity,
    /// Pixels.
    pub jitter_sigma: f64,
    /// Pixels, `[min, max]` displacement radius.
    pub miss_offset_range: [f64; 2],
    pub miss_mode: MissMode,
    /// Relative draw weight of instances overlapping the target instance when
    /// picking a swap source (non-overlapping instances have weight 1).
    pub overlap_weight: f64,
}

impl Default for ErrorDistribution {
    fn default() -> Self {
        Self {
            p_jitter: ByValidity::new(0.15, 0.2),
            p_miss: ByValidity::new(0.05, 0.2),
            p_inversion: ByValidity::new(0.03, 0.03),
            p_swap: ByValidity::new(0.04, 0.1),
            jitter_sigma: 2.0,
            miss_offset_range: [8.0, 20.0],
            miss_mode: MissMode::Displace,
            overlap_weight: 4.0,
        }
    }
}

impl ErrorDistribution {
    pub fn zero() -> Self {
        let z = ByValidity::new(0.0, 0.0);
        Self {
            p_jitter: z,
            p_miss: z,
            p_inversion: z,
            p_swap: z,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for valid in [true, false] {
            let ps = [
                self.p_jitter.get(valid),
                self.p_miss.get(valid),
                self.p_inversion.get(valid),
                self.p_swap.get(valid),
            ];
            if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 + 1e-12 {
                return Err(Error::Config("error probabilities must lie in [0, 1] and sum to at most 1".into()));
            }
        }
        let [lo, hi] = self.miss_offset_range;
        if !(self.jitter_sigma >= 0.0) || !(0.0..=hi).contains(&lo) || !(self.overlap_weight > 0.0) {
            return Err(Error::Config("invalid jitter sigma, miss range or overlap weight".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    None,
    Jitter,
    Miss,
    Inversion,
    Swap,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 5] = [
        ErrorKind::None,
        ErrorKind::Jitter,
        ErrorKind::Miss,
        ErrorKind::Inversion,
        ErrorKind::Swap,
    ];
}

/// What happened to one keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeypointTrace {
    /// The category drawn from the configured probabilities.
    pub drawn: ErrorKind,
    /// The error actually applied (inversions and swaps without a source become jitter).
    pub applied: ErrorKind,
    pub valid: bool,
}

pub fn synthesize_errors<R: Rng>(
    scene: &SceneAnnotation,
    instance_id: u64,
    schema: &KeypointSchema,
    dist: &ErrorDistribution,
    rng: &mut R,
) -> Result<Pose> {
    synthesize_errors_traced(scene, instance_id, schema, dist, rng).map(|(p, _)| p)
}

fn jitter<R: Rng>(kp: Keypoint, sigma: f64, rng: &mut R) -> Keypoint {
    if sigma == 0.0 {
        return kp;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    loop {
        let (dx, dy) = (n.sample(rng), n.sample(rng));
        if (dx * dx + dy * dy).sqrt() <= 6.0 * sigma {
            return Keypoint::new(kp.x + dx, kp.y + dy, kp.v);
        }
    }
}

pub fn synthesize_errors_traced<R: Rng>(
    scene: &SceneAnnotation,
    instance_id: u64,
    schema: &KeypointSchema,
    dist: &ErrorDistribution,
    rng: &mut R,
) -> Result<(Pose, Vec<KeypointTrace>)> {
    let gt = scene.instance(instance_id).ok_or(Error::UnknownInstance {
        image_id: scene.image_id,
        instance_id,
    })?;
    if gt.pose.count_qualifying(f64::MIN_POSITIVE) == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    let k = gt.pose.len();
    if schema.len() != k {
        return Err(Error::Schema {
            expected: schema.len(),
            found: k,
            context: format!("instance {instance_id} of image {}", scene.image_id),
        });
    }
    let others: Vec<(usize, f64)> = scene
        .instances
        .iter()
        .enumerate()
        .filter(|(_, g)| g.instance_id != instance_id)
        .map(|(i, g)| {
            let w = if iou(&g.bbox, &gt.bbox) > 0.0 { dist.overlap_weight } else { 1.0 };
            (i, w)
        })
        .collect();

    let mut out = gt.pose.clone();
    out.score = 1.0;
    let mut trace = Vec::with_capacity(k);
    for j in 0..k {
        let kp = gt.pose.keypoints[j];
        if kp.v <= 0.0 {
            trace.push(KeypointTrace {
                drawn: ErrorKind::None,
                applied: ErrorKind::None,
                valid: false,
            });
            continue;
        }
        let valid = gt.is_valid(j);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut drawn = ErrorKind::None;
        for (kind, p) in [
            (ErrorKind::Jitter, dist.p_jitter),
            (ErrorKind::Miss, dist.p_miss),
            (ErrorKind::Inversion, dist.p_inversion),
            (ErrorKind::Swap, dist.p_swap),
        ] {
            acc += p.get(valid);
            if u < acc {
                drawn = kind;
                break;
            }
        }

        let (new_kp, applied) = match drawn {
            ErrorKind::None => (kp, ErrorKind::None),
            ErrorKind::Jitter => (jitter(kp, dist.jitter_sigma, rng), ErrorKind::Jitter),
            ErrorKind::Miss => match dist.miss_mode {
                MissMode::Drop => (Keypoint::absent(), ErrorKind::Miss),
                MissMode::Displace => {
                    let [lo, hi] = dist.miss_offset_range;
                    let r = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    (Keypoint::new(kp.x + r * a.cos(), kp.y + r * a.sin(), kp.v), ErrorKind::Miss)
                }
            },
            ErrorKind::Inversion => match schema.counterpart(j).map(|c| gt.pose.keypoints[c]) {
                Some(c) if c.v > 0.0 => (Keypoint::new(c.x, c.y, kp.v), ErrorKind::Inversion),
                _ => (jitter(kp, dist.jitter_sigma, rng), ErrorKind::Jitter),
            },
            ErrorKind::Swap => {
                let cands: Vec<(usize, f64)> = others
                    .iter()
                    .copied()
                    .filter(|&(i, _)| scene.instances[i].pose.keypoints[j].v > 0.0)
                    .collect();
                let total: f64 = cands.iter().map(|c| c.1).sum();
                if cands.is_empty() {
                    (jitter(kp, dist.jitter_sigma, rng), ErrorKind::Jitter)
                } else {
                    let mut t = rng.random_range(0.0..total);
                    let mut pick = cands[cands.len() - 1].0;
                    for &(i, w) in &cands {
                        if t < w {
                            pick = i;
                            break;
                        }
                        t -= w;
                    }
                    let src = scene.instances[pick].pose.keypoints[j];
                    (Keypoint::new(src.x, src.y, kp.v), ErrorKind::Swap)
                }
            }
        };
        out.keypoints[j] = new_kp;
        trace.push(KeypointTrace { drawn, applied, valid });
    }
    Ok((out, trace))
}
