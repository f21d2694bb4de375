use log::info;
use rand::seq::SliceRandom;

use super::config::{RunConfig, Strategy, TrainConfig};
use super::models::{condition_tensor, image_tensor, BuModel, CtdModel};
use crate::error::{Error, Result};
use crate::geometry::{map_pose, Direction, Keypoint, Pose};
use crate::image::Image;
use crate::io::{Dataset, GtInstance, SceneAnnotation};
use crate::nets::backbone::OUTPUT_STRIDE;
use crate::nets::heatmap::{heatmap_targets, loss_weights, TARGET_SIGMA};
use crate::nets::{Adam, ParamStore, Tape};
use crate::rng::{derive_seed, stream};
use crate::sampling::{synthesize_errors, ConditionPool};

/// Extra loss weight on heatmap elements, proportional to the target value.
pub const FOREGROUND_WEIGHT: f64 = 4.0;
/// Offset regression weight relative to the heatmap terms.
pub const OFFSET_WEIGHT: f64 = 0.02;
/// Center heatmap spread in cells; narrower than the keypoint targets so
/// nearby instance centers stay separate peaks.
pub const CENTER_SIGMA: f64 = 1.0;
/// Cells around an instance center that regress offsets.
pub const OFFSET_RADIUS: f64 = 2.0;

const BU_STREAM: u64 = 1;
const CTD_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    /// Mean sample loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean sample loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub skipped_samples: usize,
}

pub type SampleGrads = (f64, Vec<Option<Vec<f32>>>);

/// One loss term and its parameter gradients.
fn loss_and_grads<'s>(store: &'s ParamStore<f32>, build: impl FnOnce(&mut Tape<'s, f32>) -> Result<crate::nets::Var>) -> Result<SampleGrads> {
    let mut tape = Tape::new(store);
    let loss = build(&mut tape)?;
    let value = tape.value(loss).item() as f64;
    let g = tape.backward(loss);
    Ok((value, store.ids().map(|id| g.param(id).map(|s| s.to_vec())).collect()))
}

/// Minibatch Adam over per-epoch item lists. Per-sample gradients may be
/// computed on several threads but are always summed in item order.
fn train_loop<I, S, E>(
    store: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    mut epoch_items: E,
    sample: S,
    mut on_epoch: impl FnMut(usize, &ParamStore<f32>),
) -> Result<TrainReport>
where
    I: Sync,
    E: FnMut(usize) -> Vec<I>,
    S: Fn(&ParamStore<f32>, &I) -> Result<Option<SampleGrads>> + Sync,
{
    let pool = (cfg.workers > 1)
        .then(|| rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build())
        .transpose()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut report = TrainReport::default();
    let mut adam: Option<Adam> = None;
    for epoch in 0..cfg.epochs {
        let items = epoch_items(epoch);
        let adam = adam.get_or_insert_with(|| Adam::new(cfg.adam(items.len().div_ceil(cfg.batch_size)), store));
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for batch in items.chunks(cfg.batch_size) {
            let snapshot: &ParamStore<f32> = store;
            let results: Vec<Result<Option<SampleGrads>>> = match &pool {
                Some(p) => p.install(|| {
                    use rayon::prelude::*;
                    batch.par_iter().map(|it| sample(snapshot, it)).collect()
                }),
                None => batch.iter().map(|it| sample(snapshot, it)).collect(),
            };
            let mut acc: Vec<Option<Vec<f64>>> = vec![None; store.len()];
            let mut n = 0usize;
            let mut loss_sum = 0.0;
            for r in results {
                let Some((loss, grads)) = r? else {
                    report.skipped_samples += 1;
                    continue;
                };
                n += 1;
                loss_sum += loss;
                for (a, g) in acc.iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    match a {
                        Some(a) => a.iter_mut().zip(&g).for_each(|(a, &g)| *a += g as f64),
                        None => *a = Some(g.iter().map(|&v| v as f64).collect()),
                    }
                }
            }
            if n == 0 {
                continue;
            }
            adam.update(store, &acc, 1.0 / n as f64);
            report.step_losses.push(loss_sum / n as f64);
            epoch_sum += loss_sum;
            epoch_n += n;
        }
        let mean = if epoch_n > 0 { epoch_sum / epoch_n as f64 } else { 0.0 };
        info!("epoch {} mean loss {:.6} ({} samples)", epoch + 1, mean, epoch_n);
        report.epoch_losses.push(mean);
        on_epoch(epoch, store);
    }
    Ok(report)
}

fn capped<T>(mut v: Vec<T>, cap: usize) -> Vec<T> {
    if cap > 0 {
        v.truncate(cap);
    }
    v
}

fn check_images(data: &Dataset, images: &[Image]) -> Result<()> {
    if data.scenes.len() != images.len() {
        return Err(Error::shape(&[images.len()], &[data.scenes.len()], "images per annotated scene"));
    }
    Ok(())
}

/// Point the bottom-up center channel localizes: the skeleton root when
/// labeled, the box center otherwise. Heavily overlapping figures share
/// nearly the same box center but rarely the same root.
pub fn instance_anchor(g: &GtInstance) -> (f64, f64) {
    match g.pose.keypoints.first() {
        Some(kp) if kp.v > 0.0 => (kp.x, kp.y),
        _ => g.bbox.center(),
    }
}

/// Bottom-up regression targets for a scene: keypoint and center heatmaps
/// (max over instances) plus center-to-keypoint offsets around each center.
/// Returns `(target, weights, norm)` for a weighted squared error.
pub fn bu_targets(scene: &SceneAnnotation, k: usize, h: usize, w: usize) -> (Vec<f32>, Vec<f32>, f32) {
    let stride = OUTPUT_STRIDE as f64;
    let plane = h * w;
    let channels = 3 * k + 1;
    let mut target = vec![0.0f64; channels * plane];
    let mut weight = vec![0.0f64; channels * plane];
    for g in &scene.instances {
        let hm = heatmap_targets(&g.pose, h, w, stride, TARGET_SIGMA);
        for (t, &v) in target[..k * plane].iter_mut().zip(&hm.data) {
            *t = t.max(v);
        }
        let (cx, cy) = instance_anchor(g);
        let c = heatmap_targets(&Pose::new(vec![Keypoint::new(cx, cy, 1.0)]), h, w, stride, CENTER_SIGMA);
        for (t, &v) in target[k * plane..(k + 1) * plane].iter_mut().zip(&c.data) {
            *t = t.max(v);
        }
    }
    for (wt, &t) in weight[..(k + 1) * plane].iter_mut().zip(&target) {
        *wt = 1.0 + FOREGROUND_WEIGHT * t;
    }

    // Each cell regresses the offsets of the nearest center within the radius.
    let centers: Vec<(f64, f64)> = scene
        .instances
        .iter()
        .map(|g| {
            let (x, y) = instance_anchor(g);
            (x / stride - 0.5, y / stride - 0.5)
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; plane];
    for row in 0..h {
        for col in 0..w {
            let mut best: Option<(usize, f64)> = None;
            for (i, &(cx, cy)) in centers.iter().enumerate() {
                let d = ((col as f64 - cx).powi(2) + (row as f64 - cy).powi(2)).sqrt();
                if d <= OFFSET_RADIUS && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            owner[row * w + col] = best.map(|b| b.0);
        }
    }
    let n_cells = owner.iter().filter(|o| o.is_some()).count().max(1);
    let norm = ((k + 1) * plane) as f64;
    let off_w = OFFSET_WEIGHT * norm / (n_cells * 2 * k) as f64;
    for (cell, o) in owner.iter().enumerate() {
        let Some(i) = *o else { continue };
        let (row, col) = (cell / w, cell % w);
        for (j, kp) in scene.instances[i].pose.keypoints.iter().enumerate() {
            if kp.v <= 0.0 {
                continue;
            }
            let base = (k + 1 + 2 * j) * plane + cell;
            target[base] = kp.x / stride - 0.5 - col as f64;
            target[base + plane] = kp.y / stride - 0.5 - row as f64;
            weight[base] = off_w;
            weight[base + plane] = off_w;
        }
    }
    (
        target.into_iter().map(|v| v as f32).collect(),
        weight.into_iter().map(|v| v as f32).collect(),
        norm as f32,
    )
}

pub struct BuTraining {
    pub model: BuModel,
    pub report: TrainReport,
    /// Parameters at the end of the last `snapshots` epochs, oldest first.
    pub snapshots: Vec<(usize, ParamStore<f32>)>,
}

pub fn train_bu(cfg: &RunConfig, data: &Dataset, images: &[Image]) -> Result<BuTraining> {
    check_images(data, images)?;
    let k = data.schema.len();
    let mut model = BuModel::new(k, derive_seed(cfg.seed, &[BU_STREAM]));
    let tc = &cfg.bu.train;
    let keep_from = tc.epochs.saturating_sub(cfg.bu.snapshots);
    let mut snapshots = Vec::new();
    let net = model.net.clone();
    let report = train_loop(
        &mut model.store,
        tc,
        |epoch| {
            let mut order: Vec<usize> = (0..data.scenes.len()).collect();
            order.shuffle(&mut stream(cfg.seed, &[BU_STREAM, epoch as u64]));
            capped(order, tc.max_samples)
        },
        |store, &i| {
            let img = &images[i];
            let (h, w) = (img.height / OUTPUT_STRIDE, img.width / OUTPUT_STRIDE);
            let (target, weights, norm) = bu_targets(&data.scenes[i], k, h, w);
            loss_and_grads(store, |tape| {
                let x = tape.constant(image_tensor(img));
                let out = net.forward(tape, x)?;
                Ok(tape.weighted_sse(out, target, weights, norm))
            })
            .map(Some)
        },
        |epoch, store| {
            if epoch >= keep_from {
                snapshots.push((epoch + 1, store.clone()));
            }
        },
    )?;
    Ok(BuTraining { model, report, snapshots })
}

/// Where training conditions come from.
#[derive(Debug, Clone, Copy)]
pub enum ConditionSource<'a> {
    Pool(&'a ConditionPool),
    Generative,
}

/// Crop inputs, heatmap target and loss weights for one training instance.
/// The crop follows the condition pose, never the ground-truth box.
pub fn ctd_sample(model: &CtdModel, image: &Image, condition: &Pose, gt: &Pose) -> Result<(super::models::CropInput, Vec<f32>, Vec<f32>, f32)> {
    let input = model.prepare(image, condition)?;
    let local = map_pose(gt, &input.transform, Direction::Forward);
    let (h, w) = (input.transform.out_h / OUTPUT_STRIDE, input.transform.out_w / OUTPUT_STRIDE);
    let hm = heatmap_targets(&local, h, w, OUTPUT_STRIDE as f64, TARGET_SIGMA);
    let mask: Vec<bool> = local.keypoints.iter().map(|kp| kp.v > 0.0).collect();
    let (mut weights, norm) = loss_weights(&mask, h, w);
    for (wt, &t) in weights.iter_mut().zip(&hm.data) {
        *wt *= 1.0 + FOREGROUND_WEIGHT * t;
    }
    Ok((
        input,
        hm.data.iter().map(|&v| v as f32).collect(),
        weights.iter().map(|&v| v as f32).collect(),
        norm as f32,
    ))
}

pub fn train_ctd(cfg: &RunConfig, data: &Dataset, images: &[Image], source: ConditionSource<'_>) -> Result<(CtdModel, TrainReport)> {
    check_images(data, images)?;
    match (cfg.sampling.strategy, source) {
        (Strategy::Empirical, ConditionSource::Pool(_)) | (Strategy::Generative, ConditionSource::Generative) => {}
        _ => {
            return Err(Error::Config(
                "empirical sampling needs a condition pool; generative sampling takes none".into(),
            ))
        }
    }
    let schema = cfg.schema()?;
    if schema.len() != data.schema.len() {
        return Err(Error::Schema {
            expected: schema.len(),
            found: data.schema.len(),
            context: "training annotations".into(),
        });
    }
    let mut model = CtdModel::new(cfg, derive_seed(cfg.seed, &[CTD_STREAM]))?;
    let items: Vec<(usize, usize)> = data
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.instances.len()).map(move |gi| (si, gi)))
        .filter(|&(si, gi)| match source {
            ConditionSource::Pool(pool) => {
                let s = &data.scenes[si];
                pool.entry(s.image_id, s.instances[gi].instance_id).is_ok_and(|e| !e.is_empty())
            }
            ConditionSource::Generative => true,
        })
        .collect();
    if items.is_empty() {
        return Err(Error::Config("no training instance has a condition".into()));
    }
    let frozen = model.clone();
    let tc = &cfg.ctd;
    let report = train_loop(
        &mut model.store,
        tc,
        |epoch| {
            let mut order: Vec<(usize, usize, usize)> = items.iter().map(|&(s, g)| (epoch, s, g)).collect();
            order.shuffle(&mut stream(cfg.seed, &[CTD_STREAM, epoch as u64]));
            capped(order, tc.max_samples)
        },
        |store, &(epoch, si, gi)| {
            let scene = &data.scenes[si];
            let gt = &scene.instances[gi];
            let mut rng = stream(cfg.seed, &[CTD_STREAM, epoch as u64, si as u64, gi as u64]);
            let condition = match source {
                ConditionSource::Pool(pool) => match pool.draw_empirical(scene.image_id, gt.instance_id, &mut rng)? {
                    Some(p) => p.pose.clone(),
                    None => return Ok(None),
                },
                ConditionSource::Generative => synthesize_errors(scene, gt.instance_id, &schema, &cfg.sampling.errors, &mut rng)?,
            };
            let Ok((input, target, weights, norm)) = ctd_sample(&frozen, &images[si], &condition, &gt.pose) else {
                return Ok(None);
            };
            let net = &frozen.net;
            let uses = frozen.arch().uses_condition();
            loss_and_grads(store, |tape| {
                let x = tape.constant(image_tensor(&input.image));
                let c = uses.then(|| tape.constant(condition_tensor(&input.condition)));
                let out = net.forward(tape, x, c)?;
                Ok(tape.weighted_sse(out, target, weights, norm))
            })
            .map(Some)
        },
        |_, _| {},
    )?;
    Ok((model, report))
}
