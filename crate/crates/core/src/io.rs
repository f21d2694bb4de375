//! Annotation and prediction interchange files.
//!
//! Both are single JSON documents shaped like COCO keypoint files: keypoints
//! are flat `[x0, y0, v0, x1, y1, v1, ...]` arrays and every document carries
//! its keypoint count so mismatched files are rejected on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Keypoint, Pose};
use crate::schema::KeypointSchema;

pub const ANNOTATION_FORMAT: &str = "buctd-annotations";
pub const PREDICTION_FORMAT: &str = "buctd-predictions";
pub const FORMAT_VERSION: u32 = 1;

/// One ground-truth instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub instance_id: u64,
    pub pose: Pose,
    /// Per keypoint: labeled but hidden behind a later-drawn instance.
    pub occluded: Vec<bool>,
    pub bbox: BBox,
    pub area: f64,
}

impl GtInstance {
    /// Visible and not occluded.
    pub fn is_valid(&self, k: usize) -> bool {
        self.pose.keypoints[k].v > 0.0 && !self.occluded.get(k).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub image_id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<GtInstance>,
    pub max_iou: f64,
}

impl SceneAnnotation {
    pub fn instance(&self, instance_id: u64) -> Option<&GtInstance> {
        self.instances.iter().find(|g| g.instance_id == instance_id)
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }
}

/// A split: schema plus scenes, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: KeypointSchema,
    pub scenes: Vec<SceneAnnotation>,
}

impl Dataset {
    pub fn scene(&self, image_id: u64) -> Option<&SceneAnnotation> {
        self.scenes.iter().find(|s| s.image_id == image_id)
    }

    pub fn index(&self) -> BTreeMap<u64, usize> {
        self.scenes.iter().enumerate().map(|(i, s)| (s.image_id, i)).collect()
    }

    pub fn num_instances(&self) -> usize {
        self.scenes.iter().map(|s| s.instances.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub max_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub id: u64,
    pub image_id: u64,
    pub instance_id: u64,
    pub keypoints: Vec<f64>,
    pub occluded: Vec<bool>,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub format: String,
    pub version: u32,
    pub schema: KeypointSchema,
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
}

pub fn pose_from_flat(flat: &[f64]) -> Pose {
    Pose::new(flat.chunks(3).map(|c| Keypoint::new(c[0], c[1], c[2])).collect())
}

pub fn pose_to_flat(pose: &Pose) -> Vec<f64> {
    pose.keypoints.iter().flat_map(|k| [k.x, k.y, k.v]).collect()
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, format!("line {}, column {}: {e}", e.line(), e.column())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e.to_string()))?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn to_file(&self) -> AnnotationFile {
        let images = self
            .scenes
            .iter()
            .map(|s| ImageEntry {
                id: s.image_id,
                file_name: s.file_name.clone(),
                width: s.width,
                height: s.height,
                max_iou: s.max_iou,
            })
            .collect();
        let mut next_id = 1;
        let mut annotations = Vec::with_capacity(self.num_instances());
        for s in &self.scenes {
            for g in &s.instances {
                annotations.push(AnnotationEntry {
                    id: next_id,
                    image_id: s.image_id,
                    instance_id: g.instance_id,
                    keypoints: pose_to_flat(&g.pose),
                    occluded: g.occluded.clone(),
                    bbox: [g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h],
                    area: g.area,
                });
                next_id += 1;
            }
        }
        AnnotationFile {
            format: ANNOTATION_FORMAT.into(),
            version: FORMAT_VERSION,
            schema: self.schema.clone(),
            images,
            annotations,
        }
    }

    pub fn from_file(file: AnnotationFile, path: &Path) -> Result<Self> {
        if file.format != ANNOTATION_FORMAT || file.version != FORMAT_VERSION {
            return Err(parse_err(path, format!("unsupported document {} v{}", file.format, file.version)));
        }
        file.schema.validate()?;
        let k = file.schema.len();
        let mut scenes: Vec<SceneAnnotation> = file
            .images
            .into_iter()
            .map(|im| SceneAnnotation {
                image_id: im.id,
                file_name: im.file_name,
                width: im.width,
                height: im.height,
                instances: Vec::new(),
                max_iou: im.max_iou,
            })
            .collect();
        let index: BTreeMap<u64, usize> = scenes.iter().enumerate().map(|(i, s)| (s.image_id, i)).collect();
        if index.len() != scenes.len() {
            return Err(parse_err(path, "duplicate image id"));
        }
        for (n, a) in file.annotations.into_iter().enumerate() {
            let &si = index
                .get(&a.image_id)
                .ok_or_else(|| parse_err(path, format!("annotation {n} (id {}) references unknown image {}", a.id, a.image_id)))?;
            if a.keypoints.len() != 3 * k || a.occluded.len() != k {
                return Err(parse_err(
                    path,
                    format!(
                        "annotation {n} (image {}, instance {}): expected {k} keypoints, found {}",
                        a.image_id,
                        a.instance_id,
                        a.keypoints.len() / 3
                    ),
                ));
            }
            let [x, y, w, h] = a.bbox;
            scenes[si].instances.push(GtInstance {
                instance_id: a.instance_id,
                pose: pose_from_flat(&a.keypoints).with_instance(a.instance_id),
                occluded: a.occluded,
                bbox: BBox::new(x, y, w, h),
                area: a.area,
            });
        }
        Ok(Self {
            schema: file.schema,
            scenes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: AnnotationFile = read_json(path)?;
        Self::from_file(file, path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTag {
    pub model: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedInstance {
    pub keypoints: Vec<f64>,
    pub score: f64,
    pub source: SourceTag,
    /// Index of the bottom-up proposal this pose descends from.
    pub proposal_id: u64,
}

impl PredictedInstance {
    pub fn from_pose(pose: &Pose, source: SourceTag, proposal_id: u64) -> Self {
        Self {
            keypoints: pose_to_flat(pose),
            score: pose.score,
            source,
            proposal_id,
        }
    }

    pub fn pose(&self) -> Pose {
        pose_from_flat(&self.keypoints).with_score(self.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub instances: Vec<PredictedInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub format: String,
    pub version: u32,
    pub num_keypoints: usize,
    pub records: Vec<PredictionRecord>,
}

impl PredictionFile {
    pub fn new(num_keypoints: usize, records: Vec<PredictionRecord>) -> Self {
        Self {
            format: PREDICTION_FORMAT.into(),
            version: FORMAT_VERSION,
            num_keypoints,
            records,
        }
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.format != PREDICTION_FORMAT || self.version != FORMAT_VERSION {
            return Err(parse_err(path, format!("unsupported document {} v{}", self.format, self.version)));
        }
        let k = self.num_keypoints;
        for (r, rec) in self.records.iter().enumerate() {
            for (i, inst) in rec.instances.iter().enumerate() {
                if inst.keypoints.len() != 3 * k {
                    return Err(parse_err(
                        path,
                        format!(
                            "record {r} (image {}), instance {i}: expected {k} keypoints, found {} values",
                            rec.image_id,
                            inst.keypoints.len()
                        ),
                    ));
                }
                if !(0.0..=1.0).contains(&inst.score) {
                    return Err(parse_err(
                        path,
                        format!("record {r} (image {}), instance {i}: score {} outside [0, 1]", rec.image_id, inst.score),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn save_predictions(file: &PredictionFile, path: &Path) -> Result<()> {
    file.validate(path)?;
    write_json(path, file)
}

pub fn load_predictions(path: &Path) -> Result<PredictionFile> {
    let file: PredictionFile = read_json(path)?;
    file.validate(path)?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag() -> SourceTag {
        SourceTag {
            model: "bu".into(),
            checkpoint: "step100".into(),
        }
    }

    #[test]
    fn short_instance_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut f = PredictionFile::new(
            3,
            vec![PredictionRecord {
                image_id: 9,
                instances: vec![PredictedInstance {
                    keypoints: vec![0.0; 9],
                    score: 0.5,
                    source: tag(),
                    proposal_id: 0,
                }],
            }],
        );
        save_predictions(&f, &path).unwrap();
        f.records[0].instances[0].keypoints.truncate(6);
        std::fs::write(&path, serde_json::to_string(&f).unwrap()).unwrap();
        let err = load_predictions(&path).unwrap_err().to_string();
        assert!(err.contains("image 9") && err.contains("instance 0"), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        std::fs::write(&path, "{\n  \"format\": \"buctd-predictions\",\n  oops\n}").unwrap();
        let err = load_predictions(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
