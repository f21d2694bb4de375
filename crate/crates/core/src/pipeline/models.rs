use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{CropConfig, RefineConfig, RunConfig};
use crate::condition::{render_condition, ConditionConfig, ConditionHeatmap, KeypointPalette};
use crate::error::{Error, Result};
use crate::geometry::{bbox_from_pose, fit_crop, map_pose, CropTransform, Direction, Pose};
use crate::image::Image;
use crate::io::{PredictedInstance, PredictionFile, PredictionRecord, SourceTag};
use crate::nets::backbone::OUTPUT_STRIDE;
use crate::nets::heatmap::decode_heatmaps;
use crate::nets::{Arch, BuMaps, BuNet, Checkpoint, CtdNet, CtdSpec, KeypointHeatmaps, ParamStore, Tape, Tensor};

pub const BU_ARCH: &str = "bu";

pub fn image_tensor(img: &Image) -> Tensor<f32> {
    Tensor::from_vec(&[img.channels, img.height, img.width], img.data.clone())
}

pub fn condition_tensor(c: &ConditionHeatmap) -> Tensor<f32> {
    Tensor::from_f64(&[c.channels, c.height, c.width], &c.data)
}

#[derive(Debug, Clone)]
pub struct BuModel {
    pub net: BuNet,
    pub store: ParamStore<f32>,
}

impl BuModel {
    pub fn new(num_keypoints: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = BuNet::new(num_keypoints, &mut store, &mut rng);
        Self { net, store }
    }

    pub fn num_keypoints(&self) -> usize {
        self.net.num_keypoints
    }

    pub fn checkpoint(&self, config: serde_json::Value, step: usize) -> Checkpoint {
        Checkpoint::from_store(BU_ARCH, 0, self.num_keypoints(), 0, config, step, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.arch != BU_ARCH {
            return Err(Error::Config(format!("expected a bottom-up checkpoint, found `{}`", ck.arch)));
        }
        let mut m = Self::new(ck.num_keypoints, 0);
        ck.restore_into(&mut m.store)?;
        Ok(m)
    }

    pub fn maps(&self, image: &Image) -> Result<BuMaps> {
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(image_tensor(image));
        let out = self.net.forward(&mut tape, x)?;
        let shape = tape.shape(out).to_vec();
        Ok(BuMaps {
            num_keypoints: self.num_keypoints(),
            height: shape[1],
            width: shape[2],
            stride: OUTPUT_STRIDE as f64,
            data: tape.value(out).to_f64_vec(),
        })
    }
}

/// A top-down model together with the crop and condition settings it was trained with.
#[derive(Debug, Clone)]
pub struct CtdModel {
    pub net: CtdNet,
    pub store: ParamStore<f32>,
    pub crop: CropConfig,
    pub condition: ConditionConfig,
    pub palette: KeypointPalette,
}

impl CtdModel {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let k = cfg.schema()?.len();
        let spec = CtdSpec {
            arch: cfg.model.arch,
            insert_stage: cfg.model.insert_stage,
            num_keypoints: k,
            image_channels: 3,
            cond_channels: cfg.condition.encoding.channels(k),
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = CtdNet::new(spec, &mut store, &mut rng)?;
        Ok(Self {
            net,
            store,
            crop: cfg.crop,
            condition: cfg.condition,
            palette: KeypointPalette::evenly_spaced(k),
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.net.spec.num_keypoints
    }

    pub fn arch(&self) -> Arch {
        self.net.spec.arch
    }

    pub fn checkpoint(&self, config: &RunConfig, step: usize) -> Checkpoint {
        let s = &self.net.spec;
        Checkpoint::from_store(
            s.arch.name(),
            s.insert_stage,
            s.num_keypoints,
            s.cond_channels,
            config.snapshot(),
            step,
            &self.store,
        )
    }

    /// Rebuilds the model from a checkpoint; crop and condition settings come
    /// from the checkpoint's config snapshot.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Config(format!("checkpoint config snapshot: {e}")))?;
        cfg.model.arch = ck.arch.parse().map_err(Error::Config)?;
        cfg.model.insert_stage = ck.insert_stage;
        let mut m = Self::new(&cfg, 0)?;
        ck.expect_keypoints(m.num_keypoints())?;
        ck.restore_into(&mut m.store)?;
        Ok(m)
    }

    /// Crop transform and inputs for a condition pose given in image coordinates.
    pub fn prepare(&self, image: &Image, condition: &Pose) -> Result<CropInput> {
        prepare_crop(image, condition, &self.crop, &self.condition, &self.palette)
    }

    pub fn forward(&self, input: &CropInput) -> Result<KeypointHeatmaps> {
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(image_tensor(&input.image));
        let c = self.arch().uses_condition().then(|| tape.constant(condition_tensor(&input.condition)));
        let out = self.net.forward(&mut tape, x, c)?;
        let shape = tape.shape(out).to_vec();
        Ok(KeypointHeatmaps {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            stride: OUTPUT_STRIDE as f64,
            data: tape.value(out).to_f64_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropInput {
    pub transform: CropTransform,
    pub image: Image,
    pub condition: ConditionHeatmap,
}

/// Proposal box, crop and rendered condition, built from the same module
/// operations the pipeline uses at training and inference time.
pub fn prepare_crop(
    image: &Image,
    condition: &Pose,
    crop: &CropConfig,
    cond_cfg: &ConditionConfig,
    palette: &KeypointPalette,
) -> Result<CropInput> {
    let bbox = bbox_from_pose(condition, &crop.box_config(), None)?;
    let transform = fit_crop(&bbox, crop.size, crop.size, crop.mode);
    Ok(crop_with(image, condition, transform, cond_cfg, palette))
}

fn crop_with(image: &Image, condition: &Pose, transform: CropTransform, cond_cfg: &ConditionConfig, palette: &KeypointPalette) -> CropInput {
    let local = map_pose(condition, &transform, Direction::Forward);
    CropInput {
        transform,
        image: image.crop(&transform),
        condition: render_condition(&local, transform.out_h, transform.out_w, cond_cfg, palette),
    }
}

/// Refined pose of one bottom-up proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPose {
    /// Index of the proposal in the bottom-up output.
    pub proposal: usize,
    pub pose: Pose,
}

/// Conditional top-down refinement of bottom-up proposals. Returns one list
/// per iteration; proposals without qualifying keypoints are dropped.
pub fn refine_proposals(image: &Image, proposals: &[Pose], model: &CtdModel, refine: &RefineConfig) -> Result<Vec<Vec<RefinedPose>>> {
    let k = model.num_keypoints();
    let mut out = vec![Vec::with_capacity(proposals.len()); refine.iterations];
    for (i, proposal) in proposals.iter().enumerate() {
        if proposal.len() != k {
            return Err(Error::Schema {
                expected: k,
                found: proposal.len(),
                context: format!("bottom-up proposal {i}"),
            });
        }
        let mut input = match model.prepare(image, proposal) {
            Ok(c) => c,
            Err(e) => {
                debug!("dropping proposal {i}: {e}");
                continue;
            }
        };
        for (it, slot) in out.iter_mut().enumerate() {
            let hm = model.forward(&input)?;
            let mut pose = decode_heatmaps(&hm, &input.transform);
            pose.score = proposal.score * pose.score;
            slot.push(RefinedPose { proposal: i, pose: pose.clone() });
            if it + 1 < refine.iterations {
                input = if refine.rederive_box {
                    model.prepare(image, &pose).unwrap_or_else(|_| crop_with(image, &pose, input.transform, &model.condition, &model.palette))
                } else {
                    crop_with(image, &pose, input.transform, &model.condition, &model.palette)
                };
            }
        }
    }
    Ok(out)
}

/// Bottom-up poses for every image, computed in parallel.
pub fn predict_bu(model: &BuModel, images: &[Image], decode: &crate::nets::BuDecodeConfig) -> Result<Vec<Vec<Pose>>> {
    images
        .par_iter()
        .map(|img| model.maps(img).map(|m| crate::nets::decode_bu(&m, decode)))
        .collect()
}

/// Top-down refinement for every image: `[image][iteration][instance]`.
pub fn predict_ctd(images: &[Image], proposals: &[Vec<Pose>], model: &CtdModel, refine: &RefineConfig) -> Result<Vec<Vec<Vec<RefinedPose>>>> {
    if images.len() != proposals.len() {
        return Err(Error::shape(&[proposals.len()], &[images.len()], "proposal lists per image"));
    }
    images
        .par_iter()
        .zip(proposals.par_iter())
        .map(|(img, props)| refine_proposals(img, props, model, refine))
        .collect()
}

/// Bottom-up proposals followed by `refine.iterations` conditional top-down passes.
pub fn run_pipeline(
    image: &Image,
    bu: &BuModel,
    ctd: &CtdModel,
    decode: &crate::nets::BuDecodeConfig,
    refine: &RefineConfig,
) -> Result<Vec<RefinedPose>> {
    if bu.num_keypoints() != ctd.num_keypoints() {
        return Err(Error::Schema {
            expected: bu.num_keypoints(),
            found: ctd.num_keypoints(),
            context: "top-down model vs bottom-up model".into(),
        });
    }
    let proposals = crate::nets::decode_bu(&bu.maps(image)?, decode);
    let mut iters = refine_proposals(image, &proposals, ctd, refine)?;
    Ok(iters.pop().unwrap_or_default())
}

/// Prediction file for `image_ids[i]` holding `poses[i]`; proposal ids are list positions.
pub fn bu_prediction_file(k: usize, image_ids: &[u64], poses: &[Vec<Pose>], source: &SourceTag) -> PredictionFile {
    let records = image_ids
        .iter()
        .zip(poses)
        .map(|(&id, ps)| PredictionRecord {
            image_id: id,
            instances: ps
                .iter()
                .enumerate()
                .map(|(i, p)| PredictedInstance::from_pose(p, source.clone(), i as u64))
                .collect(),
        })
        .collect();
    PredictionFile::new(k, records)
}

/// Prediction file of refined poses, keeping the originating proposal id.
pub fn refined_prediction_file(k: usize, image_ids: &[u64], poses: &[Vec<RefinedPose>], source: &SourceTag) -> PredictionFile {
    let records = image_ids
        .iter()
        .zip(poses)
        .map(|(&id, ps)| PredictionRecord {
            image_id: id,
            instances: ps
                .iter()
                .map(|r| PredictedInstance::from_pose(&r.pose, source.clone(), r.proposal as u64))
                .collect(),
        })
        .collect();
    PredictionFile::new(k, records)
}
