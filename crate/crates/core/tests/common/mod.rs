#![allow(dead_code)]

use buctd::geometry::{bbox_from_pose, max_iou, BoxConfig, Keypoint, Pose};
use buctd::io::{Dataset, GtInstance, PredictedInstance, PredictionFile, PredictionRecord, SceneAnnotation, SourceTag};
use buctd::schema::KeypointSchema;
use rand::Rng;

pub fn random_pose<R: Rng>(k: usize, rng: &mut R) -> Pose {
    Pose::new(
        (0..k)
            .map(|_| Keypoint::new(rng.random_range(5.0..90.0), rng.random_range(5.0..90.0), 2.0))
            .collect(),
    )
}

pub fn gt_instance(id: u64, pose: Pose) -> GtInstance {
    let pose = pose.with_instance(id);
    let bbox = bbox_from_pose(&pose, &BoxConfig::with_margin(0.0), None).unwrap();
    GtInstance {
        instance_id: id,
        occluded: vec![false; pose.len()],
        area: bbox.area(),
        bbox,
        pose,
    }
}

pub fn scene(image_id: u64, poses: Vec<Pose>) -> SceneAnnotation {
    let instances: Vec<GtInstance> = poses.into_iter().enumerate().map(|(i, p)| gt_instance(i as u64, p)).collect();
    let boxes: Vec<_> = instances.iter().map(|g| g.bbox).collect();
    SceneAnnotation {
        image_id,
        file_name: String::new(),
        width: 96,
        height: 96,
        max_iou: if boxes.is_empty() { 0.0 } else { max_iou(&boxes) },
        instances,
    }
}

pub fn dataset(schema: KeypointSchema, scenes: Vec<SceneAnnotation>) -> Dataset {
    Dataset { schema, scenes }
}

pub fn tag() -> SourceTag {
    SourceTag {
        model: "test".into(),
        checkpoint: "0".into(),
    }
}

/// Predictions `poses[i]` for the i-th scene of `data`, as a prediction file.
pub fn predictions(data: &Dataset, poses: &[Vec<Pose>]) -> PredictionFile {
    let records = data
        .scenes
        .iter()
        .zip(poses)
        .map(|(s, ps)| PredictionRecord {
            image_id: s.image_id,
            instances: ps
                .iter()
                .enumerate()
                .map(|(i, p)| PredictedInstance::from_pose(p, tag(), i as u64))
                .collect(),
        })
        .collect();
    PredictionFile::new(data.schema.len(), records)
}

/// Ground truth copied as predictions with the given score.
pub fn perfect(data: &Dataset, score: f64) -> PredictionFile {
    let poses: Vec<Vec<Pose>> = data
        .scenes
        .iter()
        .map(|s| {
            s.instances
                .iter()
                .map(|g| {
                    let mut p = g.pose.clone().with_score(score);
                    for kp in &mut p.keypoints {
                        kp.v = kp.v.min(1.0);
                    }
                    p
                })
                .collect()
        })
        .collect();
    predictions(data, &poses)
}
