//! Synthetic crowded scenes of articulated stick figures.
//!
//! Figures are kinematic trees rooted at keypoint 0 whose edges follow the
//! schema skeleton. Each bone's direction is a rest angle plus a bounded joint
//! deviation accumulated down the tree. Limbs are drawn as anti-aliased
//! capsules; bones ending in a left keypoint are tinted red and bones ending
//! in a right keypoint blue, so left/right confusions are visible in the image.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_from_pose, max_iou, BBox, BoxConfig, Keypoint, Pose};
use crate::image::Image;
use crate::io::{Dataset, GtInstance, SceneAnnotation};
use crate::rng::stream;
use crate::schema::KeypointSchema;

/// Visibility flag of unoccluded ground-truth keypoints.
pub const VISIBLE: f64 = 2.0;
/// Visibility flag of labeled but occluded keypoints.
pub const OCCLUDED: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    /// Range of the per-instance body gray level.
    pub body_gray: [f64; 2],
    /// Per-channel uniform jitter added to the body color.
    pub color_jitter: f64,
    /// Left/right tint strength.
    pub tint: f64,
    pub background_gray: [f64; 2],
    /// Per-pixel uniform background noise amplitude.
    pub noise: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            body_gray: [0.45, 0.85],
            color_jitter: 0.08,
            tint: 0.3,
            background_gray: [0.05, 0.25],
            noise: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Inclusive instance count range.
    pub n_instances: [usize; 2],
    /// Inclusive range the scene maxIoU must fall in.
    pub max_iou_range: [f64; 2],
    pub schema: KeypointSchema,
    pub limb_thickness: f64,
    /// Root-to-foot extent of a figure in pixels.
    pub figure_height: [f64; 2],
    /// Margin applied when deriving GT boxes from poses.
    pub box_margin: f64,
    pub appearance: Appearance,
    /// Whole-scene restarts before giving up.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 96,
            n_instances: [2, 5],
            max_iou_range: [0.0, 0.9],
            schema: KeypointSchema::stick11(),
            limb_thickness: 3.0,
            figure_height: [30.0, 40.0],
            box_margin: 0.0,
            appearance: Appearance::default(),
            max_retries: 2000,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let [n0, n1] = self.n_instances;
        let [i0, i1] = self.max_iou_range;
        let [h0, h1] = self.figure_height;
        if n0 == 0 || n0 > n1 {
            return Err(Error::Config("n_instances must be a non-empty range of positive counts".into()));
        }
        if !(0.0 <= i0 && i0 <= i1 && i1 <= 1.0) {
            return Err(Error::Config("max_iou_range must be a non-empty sub-range of [0, 1]".into()));
        }
        if !(h0 > 0.0 && h0 <= h1 && h1 + 2.0 * self.limb_thickness < self.image_size as f64) {
            return Err(Error::Config("figure_height must be a non-empty range that fits the image".into()));
        }
        if !(self.limb_thickness > 0.0) || self.box_margin < 0.0 || self.max_retries == 0 {
            return Err(Error::Config("limb_thickness, box_margin and max_retries must be positive".into()));
        }
        Kinematics::new(&self.schema)?;
        Ok(())
    }

    pub fn box_config(&self) -> BoxConfig {
        BoxConfig::with_margin(self.box_margin)
    }

    fn describe(&self) -> String {
        format!(
            "schema {}, {}x{} px, {}..={} instances, seed {}",
            self.schema.name, self.image_size, self.image_size, self.n_instances[0], self.n_instances[1], self.seed
        )
    }
}

/// Bone `(parent, child)` with rest direction, length fraction and joint range.
#[derive(Debug, Clone, Copy)]
struct Bone {
    parent: usize,
    child: usize,
    rest: f64,
    length: f64,
    range: f64,
}

struct Kinematics {
    bones: Vec<Bone>,
}

impl Kinematics {
    fn new(schema: &KeypointSchema) -> Result<Self> {
        let k = schema.len();
        let mut placed = vec![false; k];
        placed[0] = true;
        for &[a, b] in &schema.skeleton {
            if !placed[a] || placed[b] {
                return Err(Error::Config(format!(
                    "skeleton of `{}` is not a tree rooted at keypoint 0 in parent-first order",
                    schema.name
                )));
            }
            placed[b] = true;
        }
        if placed.iter().any(|p| !p) {
            return Err(Error::Config(format!("skeleton of `{}` does not reach every keypoint", schema.name)));
        }
        if schema.name == "stick11" {
            return Ok(Self { bones: stick11_bones() });
        }
        // Generic tree: siblings fan out around straight down.
        let mut depth = vec![0usize; k];
        let mut bones = Vec::with_capacity(k - 1);
        for &[a, b] in &schema.skeleton {
            depth[b] = depth[a] + 1;
            let siblings: Vec<usize> = schema.skeleton.iter().filter(|e| e[0] == a).map(|e| e[1]).collect();
            let pos = siblings.iter().position(|&s| s == b).unwrap_or(0) as f64;
            let spread = pos - (siblings.len() as f64 - 1.0) / 2.0;
            bones.push(Bone {
                parent: a,
                child: b,
                rest: FRAC_PI_2 + 0.6 * spread,
                length: 0.0,
                range: 0.35,
            });
        }
        let max_depth = *depth.iter().max().unwrap_or(&1) as f64;
        for bone in &mut bones {
            bone.length = 0.95 / max_depth;
        }
        Ok(Self { bones })
    }
}

fn stick11_bones() -> Vec<Bone> {
    let b = |parent, child, rest, length, range| Bone {
        parent,
        child,
        rest,
        length,
        range,
    };
    vec![
        b(0, 1, FRAC_PI_2, 0.15, 0.3),
        b(1, 2, FRAC_PI_2 - 0.9, 0.2, 1.2),
        b(2, 3, FRAC_PI_2 - 0.9, 0.18, 1.0),
        b(1, 4, FRAC_PI_2 + 0.9, 0.2, 1.2),
        b(4, 5, FRAC_PI_2 + 0.9, 0.18, 1.0),
        b(1, 6, FRAC_PI_2, 0.3, 0.2),
        b(6, 7, FRAC_PI_2 - 0.35, 0.25, 0.5),
        b(7, 8, FRAC_PI_2 - 0.35, 0.25, 0.5),
        b(6, 9, FRAC_PI_2 + 0.35, 0.25, 0.5),
        b(9, 10, FRAC_PI_2 + 0.35, 0.25, 0.5),
    ]
}

/// Keypoints of one figure with its root at the origin.
fn sample_figure<R: Rng>(kin: &Kinematics, k: usize, height: f64, rng: &mut R) -> Vec<(f64, f64)> {
    let tilt = rng.random_range(-0.5..=0.5);
    let mut pts = vec![(0.0, 0.0); k];
    let mut dev = vec![tilt; k];
    for bone in &kin.bones {
        let d = dev[bone.parent] + rng.random_range(-bone.range..=bone.range);
        dev[bone.child] = d;
        let a = bone.rest + d;
        let (px, py) = pts[bone.parent];
        let len = bone.length * height * rng.random_range(0.85..=1.15);
        pts[bone.child] = (px + len * a.cos(), py + len * a.sin());
    }
    pts
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

/// A capsule primitive of a placed figure.
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    color: [f64; 3],
}

struct Figure {
    pose: Pose,
    capsules: Vec<Capsule>,
}

impl Figure {
    /// Signed distance-like coverage in `[0, 1]` and the color of the nearest primitive.
    fn coverage(&self, x: f64, y: f64) -> (f64, [f64; 3]) {
        let mut best = (0.0, [0.0; 3]);
        for c in &self.capsules {
            let d = segment_distance(x, y, c.a, c.b);
            let cov = (c.radius + 0.5 - d).clamp(0.0, 1.0);
            if cov > best.0 {
                best = (cov, c.color);
            }
        }
        best
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        self.capsules.iter().any(|c| segment_distance(x, y, c.a, c.b) <= c.radius)
    }

    fn extent(&self) -> (f64, f64, f64, f64) {
        let r = self.capsules.iter().map(|c| c.radius).fold(0.0, f64::max) + 1.0;
        let xs = self.capsules.iter().flat_map(|c| [c.a.0, c.b.0]);
        let ys = self.capsules.iter().flat_map(|c| [c.a.1, c.b.1]);
        let (x0, x1) = xs.fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (y0, y1) = ys.fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        (x0 - r, y0 - r, x1 + r, y1 + r)
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn build_figure<R: Rng>(spec: &SceneSpec, kin: &Kinematics, local: &[(f64, f64)], offset: (f64, f64), rng: &mut R) -> Figure {
    let app = &spec.appearance;
    let gray = rng.random_range(app.body_gray[0]..=app.body_gray[1]);
    let j = app.color_jitter;
    let body = [0, 1, 2].map(|_| clamp01(gray + rng.random_range(-j..=j)));
    let t = app.tint;
    let left = [clamp01(body[0] + t), clamp01(body[1] - t / 2.0), clamp01(body[2] - t / 2.0)];
    let right = [clamp01(body[0] - t / 2.0), clamp01(body[1] - t / 2.0), clamp01(body[2] + t)];
    let pts: Vec<(f64, f64)> = local.iter().map(|&(x, y)| (x + offset.0, y + offset.1)).collect();
    let radius = spec.limb_thickness / 2.0;
    let mut capsules: Vec<Capsule> = kin
        .bones
        .iter()
        .map(|bone| {
            let color = if spec.schema.is_left(bone.child) {
                left
            } else if spec.schema.is_right(bone.child) {
                right
            } else {
                body
            };
            Capsule {
                a: pts[bone.parent],
                b: pts[bone.child],
                radius,
                color,
            }
        })
        .collect();
    capsules.push(Capsule {
        a: pts[0],
        b: pts[0],
        radius: 1.8 * radius,
        color: body,
    });
    let pose = Pose::new(pts.iter().map(|&(x, y)| Keypoint::new(x, y, VISIBLE)).collect());
    Figure { pose, capsules }
}

/// Offset range that keeps every keypoint at least `pad` inside the image.
fn offset_range(local: &[(f64, f64)], size: f64, pad: f64) -> ([f64; 2], [f64; 2]) {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in local {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    ([pad - x0, size - pad - x1], [pad - y0, size - pad - y1])
}

const PLACEMENT_TRIES: usize = 40;

/// Renders one scene whose maxIoU lies in `spec.max_iou_range`.
pub fn generate_scene<R: Rng>(spec: &SceneSpec, image_id: u64, rng: &mut R) -> Result<(Image, SceneAnnotation)> {
    spec.validate()?;
    let kin = Kinematics::new(&spec.schema)?;
    let k = spec.schema.len();
    let size = spec.image_size as f64;
    let pad = spec.limb_thickness + 1.0;
    let [lo, hi] = spec.max_iou_range;
    let box_cfg = spec.box_config();

    for _ in 0..spec.max_retries {
        let n = rng.random_range(spec.n_instances[0]..=spec.n_instances[1]);
        let spread = if lo >= 0.3 { rng.random_range(0.0..0.5) } else { rng.random_range(0.1..1.6) };
        let mut figures: Vec<Figure> = Vec::with_capacity(n);
        let mut boxes: Vec<BBox> = Vec::with_capacity(n);
        for _ in 0..n {
            let h = rng.random_range(spec.figure_height[0]..=spec.figure_height[1]);
            let local = sample_figure(&kin, k, h, rng);
            let (xr, yr) = offset_range(&local, size, pad);
            let mut accepted = None;
            for _ in 0..PLACEMENT_TRIES {
                let anchored = !boxes.is_empty() && rng.random_bool(0.8);
                let (mut ox, mut oy) = (rng.random_range(xr[0]..=xr[1]), rng.random_range(yr[0]..=yr[1]));
                if anchored {
                    let ab = &boxes[rng.random_range(0..boxes.len())];
                    let (cx, cy) = ab.center();
                    let (lcx, lcy) = local_box(&local).center();
                    ox = (cx - lcx + spread * ab.w * rng.random_range(-1.0..=1.0)).clamp(xr[0], xr[1]);
                    oy = (cy - lcy + spread * ab.h * rng.random_range(-1.0..=1.0)).clamp(yr[0], yr[1]);
                }
                let fig = build_figure(spec, &kin, &local, (ox, oy), rng);
                let b = bbox_from_pose(&fig.pose, &box_cfg, None)?;
                boxes.push(b);
                if max_iou(&boxes) <= hi {
                    accepted = Some(fig);
                    break;
                }
                boxes.pop();
            }
            match accepted {
                Some(f) => figures.push(f),
                None => break,
            }
        }
        if figures.len() != n {
            continue;
        }
        let m = max_iou(&boxes);
        if !(lo..=hi).contains(&m) {
            continue;
        }
        return Ok(render(spec, image_id, figures, boxes, m, rng));
    }
    Err(Error::Generation {
        target: spec.max_iou_range,
        retries: spec.max_retries,
        spec: spec.describe(),
    })
}

fn local_box(local: &[(f64, f64)]) -> BBox {
    let (xr, yr) = offset_range(local, 0.0, 0.0);
    BBox::new(-xr[0], -yr[0], -xr[1] + xr[0], -yr[1] + yr[0])
}

fn render<R: Rng>(spec: &SceneSpec, image_id: u64, figures: Vec<Figure>, boxes: Vec<BBox>, max_iou: f64, rng: &mut R) -> (Image, SceneAnnotation) {
    let s = spec.image_size;
    let app = &spec.appearance;
    let bg = rng.random_range(app.background_gray[0]..=app.background_gray[1]);
    let mut img = Image::zeros(3, s, s);
    for y in 0..s {
        for x in 0..s {
            let v = clamp01(bg + if app.noise > 0.0 { rng.random_range(-app.noise..=app.noise) } else { 0.0 });
            for c in 0..3 {
                img.set(c, y, x, v as f32);
            }
        }
    }
    for fig in &figures {
        let (x0, y0, x1, y1) = fig.extent();
        let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(s as f64).max(0.0) as usize);
        let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(s as f64).max(0.0) as usize);
        for y in ys {
            for x in xs.clone() {
                let (cov, col) = fig.coverage(x as f64 + 0.5, y as f64 + 0.5);
                if cov <= 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let old = img.get(c, y, x) as f64;
                    img.set(c, y, x, (old * (1.0 - cov) + col[c] * cov) as f32);
                }
            }
        }
    }
    img.quantize();

    let instances = figures
        .iter()
        .enumerate()
        .zip(boxes)
        .map(|((i, fig), bbox)| {
            let occluded: Vec<bool> = fig
                .pose
                .keypoints
                .iter()
                .map(|kp| figures[i + 1..].iter().any(|later| later.covers(kp.x, kp.y)))
                .collect();
            let mut pose = fig.pose.clone().with_instance(i as u64);
            for (kp, &occ) in pose.keypoints.iter_mut().zip(&occluded) {
                kp.v = if occ { OCCLUDED } else { VISIBLE };
            }
            GtInstance {
                instance_id: i as u64,
                pose,
                occluded,
                area: bbox.area(),
                bbox,
            }
        })
        .collect();
    let ann = SceneAnnotation {
        image_id,
        file_name: String::new(),
        width: s,
        height: s,
        instances,
        max_iou,
    };
    (img, ann)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Scenes cycle through this many equal-width sub-ranges of the maxIoU
    /// target so every crowdedness level is populated.
    pub strata: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            n_train: 2000,
            n_test: 500,
            strata: 3,
        }
    }
}

impl DatasetSpec {
    /// Target maxIoU range of scene `index` within a split.
    pub fn stratum(&self, index: usize) -> [f64; 2] {
        let [lo, hi] = self.scene.max_iou_range;
        let n = self.strata.max(1);
        let s = index % n;
        let w = (hi - lo) / n as f64;
        [lo + w * s as f64, if s + 1 == n { hi } else { lo + w * (s + 1) as f64 }]
    }
}

pub const MANIFEST_FORMAT: &str = "buctd-manifest";
pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub num_scenes: usize,
    pub num_instances: usize,
    pub annotation_file: String,
    /// Scene counts per maxIoU bin of width `1 / HISTOGRAM_BINS`.
    pub max_iou_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub splits: Vec<SplitManifest>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Option<&SplitManifest> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

pub fn histogram(values: impl IntoIterator<Item = f64>) -> Vec<usize> {
    let mut h = vec![0; HISTOGRAM_BINS];
    for v in values {
        let b = ((v * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
        h[b] += 1;
    }
    h
}

/// Generates one split in memory. Scene `i` uses the stream `(seed, split, i)`.
pub fn generate_split(spec: &DatasetSpec, split: u64, n: usize, first_id: u64) -> Result<Vec<(Image, SceneAnnotation)>> {
    (0..n).into_par_iter().map(|i| split_scene(spec, split, i, first_id)).collect()
}

fn split_scene(spec: &DatasetSpec, split: u64, i: usize, first_id: u64) -> Result<(Image, SceneAnnotation)> {
    let mut scene = spec.scene.clone();
    scene.max_iou_range = spec.stratum(i);
    let mut rng = stream(spec.scene.seed, &[split, i as u64]);
    generate_scene(&scene, first_id + i as u64, &mut rng)
}

const CHUNK: usize = 256;

/// Writes `train.json`, `test.json`, PNGs under `images/<split>/` and `manifest.json`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    spec.scene.validate()?;
    let mut splits = Vec::new();
    for (split_idx, (name, n, first_id)) in [("train", spec.n_train, 0u64), ("test", spec.n_test, spec.n_train as u64)]
        .into_iter()
        .enumerate()
    {
        let img_dir: PathBuf = out_dir.join("images").join(name);
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut scenes = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let len = CHUNK.min(n - start);
            let chunk: Vec<Result<(Image, SceneAnnotation)>> = (start..start + len)
                .into_par_iter()
                .map(|i| split_scene(spec, split_idx as u64, i, first_id))
                .collect();
            for r in chunk {
                let (img, mut ann) = r?;
                ann.file_name = format!("images/{name}/{:06}.png", ann.image_id);
                img.save_png(&out_dir.join(&ann.file_name))?;
                scenes.push(ann);
            }
        }
        let ds = Dataset {
            schema: spec.scene.schema.clone(),
            scenes,
        };
        let file = format!("{name}.json");
        ds.save(&out_dir.join(&file))?;
        splits.push(SplitManifest {
            name: name.into(),
            num_scenes: ds.scenes.len(),
            num_instances: ds.num_instances(),
            annotation_file: file,
            max_iou_histogram: histogram(ds.scenes.iter().map(|s| s.max_iou)),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        seed: spec.scene.seed,
        spec: spec.clone(),
        splits,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    #[test]
    fn figures_stay_inside_the_image() {
        let spec = SceneSpec::default();
        let mut rng = stream(3, &[]);
        for id in 0..20 {
            let (_, ann) = generate_scene(&spec, id, &mut rng).unwrap();
            for g in &ann.instances {
                for kp in &g.pose.keypoints {
                    assert!(kp.x > 0.0 && kp.y > 0.0 && kp.x < 96.0 && kp.y < 96.0);
                }
            }
        }
    }

    #[test]
    fn max_iou_matches_boxes() {
        let spec = SceneSpec::default();
        let mut rng = stream(4, &[]);
        let (_, ann) = generate_scene(&spec, 0, &mut rng).unwrap();
        let mut m: f64 = 0.0;
        for (i, a) in ann.instances.iter().enumerate() {
            for b in &ann.instances[i + 1..] {
                m = m.max(iou(&a.bbox, &b.bbox));
            }
        }
        assert_eq!(m, ann.max_iou);
    }

    #[test]
    fn chain_schema_generates() {
        let spec = SceneSpec {
            schema: KeypointSchema::chain(4),
            ..SceneSpec::default()
        };
        let mut rng = stream(5, &[]);
        let (_, ann) = generate_scene(&spec, 0, &mut rng).unwrap();
        assert!(ann.instances.iter().all(|g| g.pose.len() == 4));
    }

    #[test]
    fn strata_partition_the_range() {
        let d = DatasetSpec::default();
        assert_eq!(d.stratum(0)[0], 0.0);
        assert_eq!(d.stratum(2)[1], 0.9);
        assert!((d.stratum(1)[0] - 0.3).abs() < 1e-12);
        assert!((d.stratum(2)[0] - 0.6).abs() < 1e-12);
    }
}
