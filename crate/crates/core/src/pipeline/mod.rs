//! The two-stage workflow: bottom-up training and prediction, conditional
//! top-down training under either sampling strategy, refinement and export.

pub mod config;
pub mod models;
pub mod train;

pub use config::{RunConfig, Strategy};
pub use models::{
    bu_prediction_file, predict_bu, predict_ctd, prepare_crop, refine_proposals, refined_prediction_file, run_pipeline,
    BuModel, CropInput, CtdModel, RefinedPose,
};
pub use train::{train_bu, train_ctd, BuTraining, ConditionSource, TrainReport};

use std::path::Path;

use rayon::prelude::*;

use crate::error::Result;
use crate::image::Image;
use crate::io::{Dataset, PredictionFile, SourceTag};
use crate::sampling::{build_condition_pool, ConditionPool};

/// Scene images in annotation order; file names resolve against `base`.
pub fn load_images(data: &Dataset, base: &Path) -> Result<Vec<Image>> {
    data.scenes.par_iter().map(|s| Image::load_png(&base.join(&s.file_name))).collect()
}

/// Bottom-up predictions on `data` for each named checkpoint.
pub fn checkpoint_predictions(models: &[(String, BuModel)], data: &Dataset, images: &[Image], cfg: &RunConfig) -> Result<Vec<(String, PredictionFile)>> {
    let ids: Vec<u64> = data.scenes.iter().map(|s| s.image_id).collect();
    models
        .iter()
        .map(|(tag, m)| {
            let poses = predict_bu(m, images, &cfg.bu.decode)?;
            let source = SourceTag {
                model: models::BU_ARCH.into(),
                checkpoint: tag.clone(),
            };
            Ok((tag.clone(), bu_prediction_file(m.num_keypoints(), &ids, &poses, &source)))
        })
        .collect()
}

pub fn empirical_pool(files: &[(String, PredictionFile)], data: &Dataset, cfg: &RunConfig) -> Result<ConditionPool> {
    build_condition_pool(files, data, cfg.sampling.metric, cfg.sampling.floor, &cfg.oks_params()?)
}
