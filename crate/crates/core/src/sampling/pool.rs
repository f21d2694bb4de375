use std::collections::BTreeMap;

use rand::Rng;

use super::matching::{match_to_gt, MatchMetric};
use super::oks::OksParams;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::io::{Dataset, PredictionFile};

#[derive(Debug, Clone, PartialEq)]
pub struct PooledPose {
    pub pose: Pose,
    pub checkpoint: String,
    pub similarity: f64,
}

/// Matched bottom-up predictions per `(image id, gt instance id)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionPool {
    entries: BTreeMap<(u64, u64), Vec<PooledPose>>,
}

impl ConditionPool {
    pub fn entry(&self, image_id: u64, instance_id: u64) -> Result<&[PooledPose]> {
        self.entries
            .get(&(image_id, instance_id))
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownInstance { image_id, instance_id })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(u64, u64), &Vec<PooledPose>)> {
        self.entries.iter()
    }

    pub fn num_poses(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Uniform draw over the entry; `None` when no checkpoint matched the GT.
    pub fn draw_empirical<R: Rng>(&self, image_id: u64, instance_id: u64, rng: &mut R) -> Result<Option<&PooledPose>> {
        let e = self.entry(image_id, instance_id)?;
        if e.is_empty() {
            return Ok(None);
        }
        Ok(Some(&e[rng.random_range(0..e.len())]))
    }
}

/// Union over checkpoints of each GT instance's one-to-one matched prediction.
pub fn build_condition_pool(
    checkpoints: &[(String, PredictionFile)],
    gts: &Dataset,
    metric: MatchMetric,
    floor: f64,
    params: &OksParams,
) -> Result<ConditionPool> {
    let mut entries = BTreeMap::new();
    for s in &gts.scenes {
        for g in &s.instances {
            entries.insert((s.image_id, g.instance_id), Vec::new());
        }
    }
    let index = gts.index();
    let k = gts.schema.len();
    for (tag, file) in checkpoints {
        if file.num_keypoints != k {
            return Err(Error::Schema {
                expected: k,
                found: file.num_keypoints,
                context: format!("predictions of checkpoint {tag}"),
            });
        }
        for rec in &file.records {
            let &si = index.get(&rec.image_id).ok_or(Error::UnknownImage(rec.image_id))?;
            let scene = &gts.scenes[si];
            let preds: Vec<Pose> = rec.instances.iter().map(|i| i.pose()).collect();
            let m = match_to_gt(&preds, &scene.instances, metric, floor, params);
            debug_assert!(m.is_one_to_one());
            for &(p, g, sim) in &m.pairs {
                let gid = scene.instances[g].instance_id;
                entries
                    .get_mut(&(scene.image_id, gid))
                    .expect("every GT has an entry")
                    .push(PooledPose {
                        pose: preds[p].clone(),
                        checkpoint: tag.clone(),
                        similarity: sim,
                    });
            }
        }
    }
    Ok(ConditionPool { entries })
}
