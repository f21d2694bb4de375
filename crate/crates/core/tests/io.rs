mod common;

use std::fs;

use buctd::io::{load_predictions, save_predictions, Dataset, PredictedInstance, PredictionFile, PredictionRecord, SourceTag};
use buctd::schema::KeypointSchema;
use buctd::Error;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_file(n: usize, seed: u64) -> PredictionFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| PredictionRecord {
            image_id: i as u64 * 3 + 1,
            instances: (0..rng.random_range(0..4))
                .map(|j| {
                    let mut p = random_pose(5, &mut rng).with_score(rng.random());
                    for kp in &mut p.keypoints {
                        kp.x += rng.random::<f64>() * 1e-7;
                        kp.v = rng.random();
                    }
                    PredictedInstance::from_pose(
                        &p,
                        SourceTag {
                            model: "bu".into(),
                            checkpoint: format!("epoch-{}", j % 3),
                        },
                        j,
                    )
                })
                .collect(),
        })
        .collect();
    PredictionFile::new(5, records)
}

#[test]
fn predictions_round_trip_exactly_and_save_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let f = random_file(1000, 1);
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    save_predictions(&f, &a).unwrap();
    let back = load_predictions(&a).unwrap();
    assert_eq!(back, f);
    save_predictions(&back, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn empty_predictions_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.json");
    let f = PredictionFile::new(11, Vec::new());
    save_predictions(&f, &p).unwrap();
    assert_eq!(load_predictions(&p).unwrap(), f);
}

#[test]
fn missing_keypoint_names_the_instance() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    let mut f = random_file(3, 2);
    let rec = f.records.iter_mut().find(|r| r.instances.len() > 1).unwrap();
    rec.instances[1].keypoints.truncate(12);
    fs::write(&p, serde_json::to_string(&f).unwrap()).unwrap();
    match load_predictions(&p) {
        Err(Error::Parse { msg, .. }) => assert!(msg.contains("instance 1"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn annotations_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scenes = (0..5).map(|i| scene(i, (0..3).map(|_| random_pose(11, &mut rng)).collect())).collect();
    let data = dataset(KeypointSchema::stick11(), scenes);
    let p = dir.path().join("ann.json");
    data.save(&p).unwrap();
    assert_eq!(Dataset::load(&p).unwrap(), data);
}
