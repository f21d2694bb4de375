mod common;

use buctd::eval::{ap_by_crowding, average_precision, precision_recall, EvalConfig};
use buctd::geometry::Pose;
use buctd::io::Dataset;
use buctd::sampling::OksParams;
use buctd::schema::KeypointSchema;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(schema: &KeypointSchema) -> EvalConfig {
    EvalConfig::new(OksParams::for_schema(schema))
}

fn crowd(seed: u64, scenes: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = KeypointSchema::chain(4);
    let scenes = (0..scenes)
        .map(|i| {
            let n = 1 + i % 3;
            scene(i as u64, (0..n).map(|_| random_pose(4, &mut rng)).collect())
        })
        .collect();
    dataset(schema, scenes)
}

#[test]
fn perfect_predictions_score_one_everywhere() {
    let data = crowd(1, 12);
    let r = ap_by_crowding(&perfect(&data, 1.0), &data, &cfg(&data.schema)).unwrap();
    assert_eq!(r.ap, 1.0);
    assert!(r.per_threshold.iter().all(|t| t.ap == 1.0));
    for b in &r.bands {
        assert!(b.ap.is_none_or(|ap| ap == 1.0), "{b:?}");
    }
}

#[test]
fn no_predictions_score_zero() {
    let data = crowd(2, 5);
    let r = average_precision(&predictions(&data, &vec![Vec::new(); 5]), &data, &cfg(&data.schema)).unwrap();
    assert_eq!(r.ap, 0.0);
    assert!(r.per_threshold.iter().all(|t| t.recall.is_empty()));
}

#[test]
fn half_of_the_instances_found() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (random_pose(4, &mut rng), random_pose(4, &mut rng));
    let data = dataset(KeypointSchema::chain(4), vec![scene(0, vec![a.clone(), b])]);
    let r = average_precision(&predictions(&data, &[vec![a]]), &data, &cfg(&data.schema)).unwrap();
    for t in &r.per_threshold {
        assert_eq!(t.ap, 0.5);
    }
}

#[test]
fn single_instance_scenes_fill_only_the_low_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scenes = (0..4).map(|i| scene(i, vec![random_pose(4, &mut rng)])).collect();
    let data = dataset(KeypointSchema::chain(4), scenes);
    let r = ap_by_crowding(&perfect(&data, 0.9), &data, &cfg(&data.schema)).unwrap();
    assert_eq!(r.ap_low(), Some(1.0));
    assert_eq!(r.ap_medium(), None);
    assert_eq!(r.ap_high(), None);
}

#[test]
fn bands_partition_the_images() {
    let data = crowd(5, 30);
    let r = ap_by_crowding(&perfect(&data, 0.5), &data, &cfg(&data.schema)).unwrap();
    assert_eq!(r.bands.iter().map(|b| b.images).sum::<usize>(), r.num_images);
    assert_eq!(r.num_images, 30);
}

#[test]
fn curve_shapes() {
    let data = crowd(6, 6);
    let c = cfg(&data.schema);
    let pr = precision_recall(&perfect(&data, 1.0), &data, 0.5, &c).unwrap();
    assert!(pr.iter().all(|&(_, p)| p == 1.0));
    assert_eq!(pr.last().unwrap().0, 1.0);

    let far: Vec<Vec<Pose>> = data
        .scenes
        .iter()
        .map(|s| {
            s.instances
                .iter()
                .map(|g| {
                    let mut p = g.pose.clone().with_score(0.5);
                    for kp in &mut p.keypoints {
                        kp.x += 500.0;
                        kp.v = 1.0;
                    }
                    p
                })
                .collect()
        })
        .collect();
    let pr = precision_recall(&predictions(&data, &far), &data, 0.5, &c).unwrap();
    assert!(pr.iter().all(|&(r, p)| p == 0.0 && r == 0.0));
}

#[test]
fn report_names_its_config() {
    let data = crowd(7, 3);
    let c = cfg(&data.schema);
    let r = average_precision(&perfect(&data, 1.0), &data, &c).unwrap();
    let back: EvalConfig = serde_json::from_value(r.config.clone()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn unknown_image_is_rejected() {
    let data = crowd(8, 2);
    let mut p = perfect(&data, 1.0);
    p.records[0].image_id = 999;
    assert!(average_precision(&p, &data, &cfg(&data.schema)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lower_scored_duplicate_never_raises_ap(seed in any::<u64>(), noise in 0.0..6.0f64, which in 0usize..64) {
        let data = crowd(seed, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut poses: Vec<Vec<Pose>> = data.scenes.iter().map(|s| {
            s.instances.iter().map(|g| {
                let mut p = g.pose.clone().with_score(rand::Rng::random_range(&mut rng, 0.2..1.0));
                for kp in &mut p.keypoints {
                    kp.x += rand::Rng::random_range(&mut rng, -noise..=noise);
                    kp.v = 1.0;
                }
                p
            }).collect()
        }).collect();
        let c = cfg(&data.schema);
        let before = average_precision(&predictions(&data, &poses), &data, &c).unwrap();
        let img = which % poses.len();
        if let Some(src) = poses[img].first().cloned() {
            let dup = src.clone().with_score(src.score * 0.5);
            poses[img].push(dup);
            let after = average_precision(&predictions(&data, &poses), &data, &c).unwrap();
            prop_assert!(after.ap <= before.ap + 1e-12, "{} > {}", after.ap, before.ap);
        }
    }
}
