use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, BBox};
use crate::schema::KeypointSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSource {
    BboxArea,
    AnnotationArea,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OksParams {
    pub kappas: Vec<f64>,
    pub scale_source: ScaleSource,
}

impl OksParams {
    pub fn for_schema(schema: &KeypointSchema) -> Self {
        Self {
            kappas: schema.kappas.clone(),
            scale_source: ScaleSource::AnnotationArea,
        }
    }

    pub fn scale(&self, bbox: &BBox, area: f64) -> f64 {
        match self.scale_source {
            ScaleSource::BboxArea => bbox.area(),
            ScaleSource::AnnotationArea => area,
        }
    }
}

/// Mean over labeled ground-truth keypoints of `exp(-d^2 / (2 scale kappa^2))`.
pub fn oks(pred: &Pose, gt: &Pose, scale: f64, params: &OksParams) -> Result<f64> {
    let k = gt.len();
    if pred.len() != k || params.kappas.len() != k {
        return Err(Error::Schema {
            expected: k,
            found: if pred.len() != k { pred.len() } else { params.kappas.len() },
            context: "oks".into(),
        });
    }
    if !(scale > 0.0) {
        return Err(Error::Config(format!("oks scale must be positive, got {scale}")));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), kappa) in pred.keypoints.iter().zip(&gt.keypoints).zip(&params.kappas) {
        if g.v <= 0.0 {
            continue;
        }
        let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        sum += (-d2 / (2.0 * scale * kappa * kappa)).exp();
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(sum / n as f64)
}
