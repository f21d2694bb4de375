mod common;

use buctd::geometry::{Keypoint, Pose};
use buctd::io::PredictionFile;
use buctd::sampling::generative::{synthesize_errors_traced, ErrorKind};
use buctd::sampling::{
    build_condition_pool, match_to_gt, oks, synthesize_errors, ByValidity, ErrorDistribution, MatchMetric, OksParams,
    ScaleSource,
};
use buctd::schema::KeypointSchema;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_params(k: usize) -> OksParams {
    OksParams {
        kappas: vec![1.0; k],
        scale_source: ScaleSource::AnnotationArea,
    }
}

#[test]
fn oks_closed_forms() {
    let g = Pose::new(vec![Keypoint::new(3.0, 4.0, 2.0)]);
    let p = Pose::new(vec![Keypoint::new(4.0, 5.0, 1.0)]);
    assert_eq!(oks(&g, &g, 1.0, &unit_params(1)).unwrap(), 1.0);
    assert!((oks(&p, &g, 1.0, &unit_params(1)).unwrap() - (-1f64).exp()).abs() < 1e-12);

    let g2 = Pose::new(vec![Keypoint::new(0.0, 0.0, 2.0), Keypoint::new(3.0, 4.0, 2.0)]);
    let p2 = Pose::new(vec![Keypoint::new(0.0, 0.0, 1.0), Keypoint::new(4.0, 5.0, 1.0)]);
    let v = oks(&p2, &g2, 1.0, &unit_params(2)).unwrap();
    assert!((v - 0.68394).abs() < 1e-5, "{v}");
}

#[test]
fn matching_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let schema = KeypointSchema::chain(5);
    let gts: Vec<_> = (0..3).map(|i| gt_instance(i, random_pose(5, &mut rng))).collect();
    let params = OksParams::for_schema(&schema);
    let m = match_to_gt(&[gts[1].pose.clone()], &gts, MatchMetric::Oks, 0.1, &params);
    assert_eq!(m.pairs, vec![(0, 1, 1.0)]);
    let m = match_to_gt(&[], &gts, MatchMetric::Oks, 0.1, &params);
    assert!(m.pairs.is_empty());
    assert_eq!(m.unmatched_gts, vec![0, 1, 2]);
    let m = match_to_gt(&[gts[2].pose.clone()], &gts, MatchMetric::BboxIou, 0.5, &params);
    assert_eq!(m.pairs, vec![(0, 2, 1.0)]);
}

fn ckpt(data: &buctd::io::Dataset, poses: &[Vec<Pose>]) -> PredictionFile {
    predictions(data, poses)
}

#[test]
fn pool_from_perfect_and_partial_checkpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let schema = KeypointSchema::chain(5);
    let scenes: Vec<_> = (0..3).map(|i| scene(i, (0..2).map(|_| random_pose(5, &mut rng)).collect())).collect();
    let data = dataset(schema.clone(), scenes);
    let params = OksParams::for_schema(&schema);

    let pool = build_condition_pool(&[("a".into(), perfect(&data, 1.0))], &data, MatchMetric::Oks, 0.1, &params).unwrap();
    assert_eq!(pool.len(), 6);
    for (_, e) in pool.iter() {
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].similarity, 1.0);
    }

    // Second checkpoint misses instance 1 of every scene.
    let partial: Vec<Vec<Pose>> = data.scenes.iter().map(|s| vec![s.instances[0].pose.clone()]).collect();
    let files = vec![
        ("a".to_string(), perfect(&data, 1.0)),
        ("b".to_string(), ckpt(&data, &partial)),
        ("c".to_string(), perfect(&data, 0.7)),
    ];
    let pool = build_condition_pool(&files, &data, MatchMetric::Oks, 0.1, &params).unwrap();
    for s in &data.scenes {
        let e0 = pool.entry(s.image_id, 0).unwrap();
        let e1 = pool.entry(s.image_id, 1).unwrap();
        assert_eq!(e0.len(), 3);
        assert_eq!(e1.len(), 2);
        assert!(e1.iter().all(|p| p.checkpoint != "b"));
    }
}

#[test]
fn empirical_draws_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let schema = KeypointSchema::chain(3);
    let base = random_pose(3, &mut rng);
    let data = dataset(schema.clone(), vec![scene(0, vec![base.clone()]), scene(1, vec![random_pose(3, &mut rng)])]);
    let files: Vec<(String, PredictionFile)> = (0..4)
        .map(|c| {
            let mut p = base.clone().with_score(1.0);
            for kp in &mut p.keypoints {
                kp.x += 0.1 * c as f64;
                kp.v = 1.0;
            }
            (format!("c{c}"), ckpt(&data, &[vec![p], Vec::new()]))
        })
        .collect();
    let pool = build_condition_pool(&files, &data, MatchMetric::Oks, 0.1, &OksParams::for_schema(&schema)).unwrap();
    assert!(pool.draw_empirical(1, 0, &mut rng).unwrap().is_none());
    assert!(pool.draw_empirical(7, 0, &mut rng).is_err());

    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let d = pool.draw_empirical(0, 0, &mut rng).unwrap().unwrap();
        counts[d.checkpoint[1..].parse::<usize>().unwrap()] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.25).abs() < 0.01, "{counts:?}");
    }
}

fn crowd_scene(seed: u64) -> (buctd::io::SceneAnnotation, KeypointSchema) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = KeypointSchema::stick11();
    let s = scene(0, (0..4).map(|_| random_pose(11, &mut rng)).collect());
    (s, schema)
}

#[test]
fn zero_probabilities_return_the_ground_truth() {
    let (s, schema) = crowd_scene(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = synthesize_errors(&s, 2, &schema, &ErrorDistribution::zero(), &mut rng).unwrap();
    assert_eq!(out.keypoints, s.instances[2].pose.keypoints);
}

#[test]
fn jitter_frequency() {
    let (s, schema) = crowd_scene(5);
    let dist = ErrorDistribution {
        p_jitter: ByValidity::new(0.15, 0.15),
        ..ErrorDistribution::zero()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut jittered, mut total) = (0usize, 0usize);
    while total < 100_000 {
        let (_, trace) = synthesize_errors_traced(&s, 0, &schema, &dist, &mut rng).unwrap();
        for t in trace {
            total += 1;
            jittered += (t.applied == ErrorKind::Jitter) as usize;
        }
    }
    let f = jittered as f64 / total as f64;
    assert!((f - 0.15).abs() < 0.005, "{f}");
}

#[test]
fn unknown_instance_and_empty_pose_are_errors() {
    let (mut s, schema) = crowd_scene(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    assert!(synthesize_errors(&s, 99, &schema, &ErrorDistribution::default(), &mut rng).is_err());
    for kp in &mut s.instances[0].pose.keypoints {
        kp.v = 0.0;
    }
    assert!(synthesize_errors(&s, 0, &schema, &ErrorDistribution::default(), &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_is_one_to_one(seed in any::<u64>(), np in 0usize..6, ng in 0usize..6, floor in 0.0..0.9f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<_> = (0..ng).map(|i| gt_instance(i as u64, random_pose(4, &mut rng))).collect();
        let preds: Vec<Pose> = (0..np).map(|_| random_pose(4, &mut rng).with_score(rand::Rng::random(&mut rng))).collect();
        let m = match_to_gt(&preds, &gts, MatchMetric::Oks, floor, &unit_params(4));
        prop_assert!(m.is_one_to_one());
        prop_assert_eq!(m.pairs.len() + m.unmatched_preds.len(), np);
        prop_assert_eq!(m.pairs.len() + m.unmatched_gts.len(), ng);
        prop_assert!(m.pairs.iter().all(|t| t.2 >= floor));
    }

    /// Jittered points stay near their ground truth; swapped points land on
    /// another instance's keypoint of the same index.
    #[test]
    fn error_types_follow_their_own_rule(seed in any::<u64>()) {
        let (s, schema) = crowd_scene(seed);
        let dist = ErrorDistribution {
            p_jitter: ByValidity::new(0.3, 0.3),
            p_swap: ByValidity::new(0.3, 0.3),
            ..ErrorDistribution::zero()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, trace) = synthesize_errors_traced(&s, 1, &schema, &dist, &mut rng).unwrap();
        let gt = &s.instances[1].pose;
        for (j, t) in trace.iter().enumerate() {
            let (o, g) = (out.keypoints[j], gt.keypoints[j]);
            match t.applied {
                ErrorKind::Jitter => prop_assert!(((o.x - g.x).powi(2) + (o.y - g.y).powi(2)).sqrt() <= 6.0 * dist.jitter_sigma + 1e-9),
                ErrorKind::Swap => prop_assert!(s.instances.iter().filter(|i| i.instance_id != 1)
                    .any(|i| i.pose.keypoints[j].x == o.x && i.pose.keypoints[j].y == o.y)),
                ErrorKind::None => prop_assert_eq!((o.x, o.y), (g.x, g.y)),
                _ => {}
            }
        }
    }
}
