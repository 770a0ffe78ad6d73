//! Loading a scene directory and lifting its masks and depth into
//! per-instance point clouds in the canonical frame.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::{self, DepthSequence};
use crate::formats::{self, FormatError, KeypointRow, Mask16, SceneFile, Tensor3};
use crate::geometry::{self, CameraIntrinsics, CameraPose, FrameTag, GeometryError, PointCloud, Vec3};
use crate::tracking::{self, AssociationConfig, Detection, Track, TrackingError};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Depth(#[from] depth::DepthError),
    #[error("inconsistent scene: {0}")]
    Inconsistent(String),
    #[error("scene is not prepared: {0} is missing")]
    NotPrepared(PathBuf),
}

pub type Result<T> = std::result::Result<T, SceneError>;

pub const PREPARED_DIR: &str = "prepared";
pub const CONSISTENT_DEPTH_FILE: &str = "depth_consistent.svdf";
pub const STATS_FILE: &str = "stats.json";

/// Classes that form the room shell rather than objects.
pub const STRUCTURAL_CLASSES: [&str; 3] = ["floor", "wall", "ceiling"];

pub fn is_structural(class_name: &str) -> bool {
    STRUCTURAL_CLASSES.contains(&class_name)
}

/// Raw contents of a scene directory.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub dir: PathBuf,
    pub file: SceneFile,
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<CameraPose>,
    pub depth: DepthSequence,
    pub depth_ref: DepthSequence,
    pub masks: Vec<Mask16>,
    pub detections: Vec<Detection>,
    pub keypoints: Vec<KeypointRow>,
}

impl SceneBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let file = SceneFile::read(&dir.join("scene.json"))?;
        let i = &file.intrinsics;
        let intrinsics = CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy, i.width, i.height)?;
        let poses = file.poses.iter().map(|p| CameraPose::from_row_major(&p.r, &p.t)).collect::<std::result::Result<Vec<_>, _>>()?;
        let depth = formats::read_svdf(&dir.join(&file.files.depth))?.to_depth();
        let depth_ref = formats::read_svdf(&dir.join(&file.files.depth_ref))?.to_depth();
        let frames = poses.len();
        let expect = (frames, i.height as usize, i.width as usize);
        for (name, d) in [("depth", &depth), ("depth_ref", &depth_ref)] {
            if d.shape() != expect {
                return Err(SceneError::Inconsistent(format!("{name} has shape {:?}, expected {expect:?}", d.shape())));
            }
        }
        let mask_dir = dir.join(&file.files.masks);
        let masks = (0..frames).map(|t| formats::read_pgm(&mask_dir.join(formats::mask_file_name(t)))).collect::<std::result::Result<Vec<_>, _>>()?;
        for (t, m) in masks.iter().enumerate() {
            if (m.height, m.width) != (expect.1, expect.2) {
                return Err(SceneError::Inconsistent(format!("mask {t} is {}x{}, expected {}x{}", m.width, m.height, expect.2, expect.1)));
            }
        }
        let detections: Vec<Detection> = formats::read_jsonl(&dir.join(&file.files.detections))?;
        if let Some(d) = detections.iter().find(|d| d.frame >= frames) {
            return Err(SceneError::Inconsistent(format!("detection in frame {} beyond {frames} frames", d.frame)));
        }
        let keypoints = match &file.files.keypoints {
            Some(k) => formats::read_jsonl(&dir.join(k))?,
            None => Vec::new(),
        };
        for id in file.instances.keys() {
            if id.parse::<u16>().is_err() {
                return Err(SceneError::Inconsistent(format!("instance key {id:?} is not a mask id")));
            }
        }
        Ok(SceneBundle { dir: dir.to_path_buf(), file, intrinsics, poses, depth, depth_ref, masks, detections, keypoints })
    }

    pub fn prepared_depth_path(&self) -> PathBuf {
        self.dir.join(PREPARED_DIR).join(CONSISTENT_DEPTH_FILE)
    }

    /// The temporally consistent depth written by the prepare step.
    pub fn load_prepared_depth(&self) -> Result<DepthSequence> {
        let path = self.prepared_depth_path();
        if !path.exists() {
            return Err(SceneError::NotPrepared(path));
        }
        let d = formats::read_svdf(&path)?.to_depth();
        if d.shape() != self.depth.shape() {
            return Err(SceneError::Inconsistent(format!("prepared depth has shape {:?}, expected {:?}", d.shape(), self.depth.shape())));
        }
        Ok(d)
    }

    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    pub fn up_world(&self) -> Vec3 {
        self.file.meta.up.map(Vec3::from).unwrap_or_else(|| -Vec3::y())
    }

    pub fn class_of(&self, id: u16) -> Option<&str> {
        self.file.instances.get(&id.to_string()).map(|i| i.class_name.as_str())
    }
}

/// Scene-level statistics used for bucketing and anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub p95_depth: f64,
    pub median_depth: f64,
    pub valid_depth_count: usize,
    pub max_object_extent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_height: Option<f64>,
}

pub fn depth_stats(d: &DepthSequence) -> Option<(f64, f64)> {
    let mut values: Vec<f64> = d.valid_values().collect();
    let p95 = depth::percentile(&mut values, 0.95)?;
    let median = depth::lower_median(&mut values)?;
    Some((p95, median))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u16,
    pub class_name: String,
    /// Canonical-frame points from every frame.
    pub cloud: PointCloud,
    /// Frames in which the mask shows this instance.
    pub frames: Vec<usize>,
}

impl Instance {
    pub fn structural(&self) -> bool {
        is_structural(&self.class_name)
    }
}

/// Everything task generation needs, derived from a bundle.
#[derive(Debug, Clone)]
pub struct SceneAnnotations {
    pub scene_id: String,
    pub source: String,
    pub indoor: bool,
    pub intrinsics: CameraIntrinsics,
    /// Camera poses relative to frame 0 (canonical-from-camera).
    pub poses: Vec<CameraPose>,
    /// Gravity up direction in the canonical frame.
    pub up: Vec3,
    pub depth: DepthSequence,
    pub masks: Vec<Mask16>,
    pub instances: BTreeMap<u16, Instance>,
    pub detections: Vec<Detection>,
    pub tracks: Vec<Track>,
    pub keypoints: Vec<KeypointRow>,
    pub stats: SceneStats,
    pub assoc: AssociationConfig,
    pub pixel_stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationConfig {
    /// Sample every `pixel_stride`-th row and column when lifting masks.
    pub pixel_stride: usize,
    pub assoc: AssociationConfig,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig { pixel_stride: 2, assoc: AssociationConfig::default() }
    }
}

/// Canonical-frame point seen at pixel `(x, y)` of frame `t`.
pub fn lift_pixel(depth: &DepthSequence, intr: &CameraIntrinsics, pose: &CameraPose, t: usize, x: usize, y: usize) -> Option<Vec3> {
    let d = depth.get(t, y, x)?;
    let p = geometry::back_project((x as f64, y as f64), d, intr).ok()?;
    Some(pose.camera_to_world(&p))
}

/// Canonical points of instance `id` over all frames, sampled on a pixel
/// grid with the given stride.
pub fn instance_points(
    depth: &DepthSequence,
    masks: &[Mask16],
    intr: &CameraIntrinsics,
    poses: &[CameraPose],
    id: u16,
    stride: usize,
) -> Vec<Vec3> {
    let stride = stride.max(1);
    let mut pts = Vec::new();
    for (t, mask) in masks.iter().enumerate() {
        for y in (0..mask.height).step_by(stride) {
            for x in (0..mask.width).step_by(stride) {
                if mask.get(x, y) == id {
                    if let Some(p) = lift_pixel(depth, intr, &poses[t], t, x, y) {
                        pts.push(p);
                    }
                }
            }
        }
    }
    pts
}

/// Unit normal of a roughly planar cloud: the least-variance principal
/// direction, signed so its largest component is positive.
pub fn plane_normal(cloud: &PointCloud) -> Option<Vec3> {
    if cloud.len() < 3 {
        return None;
    }
    let c = cloud.centroid();
    let mut cov = Matrix3::zeros();
    for p in &cloud.points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / cloud.len() as f64);
    let k = eig.eigenvalues.imin();
    let mut n: Vec3 = eig.eigenvectors.column(k).into_owned();
    let big = n.iamax();
    if n[big] < 0.0 {
        n = -n;
    }
    Some(n.normalize())
}

/// Bounding box in pixels `[x1, y1, x2, y2]` (exclusive max) of `id` in a mask.
pub fn mask_bbox(mask: &Mask16, id: u16) -> Option<[f64; 4]> {
    let mut b: Option<[usize; 4]> = None;
    for (x, y) in mask.pixels(id) {
        b = Some(match b {
            None => [x, y, x, y],
            Some([x1, y1, x2, y2]) => [x1.min(x), y1.min(y), x2.max(x), y2.max(y)],
        });
    }
    b.map(|[x1, y1, x2, y2]| [x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64])
}

impl SceneAnnotations {
    /// Build annotations from a bundle and its prepared depth.
    pub fn build(bundle: &SceneBundle, depth: DepthSequence, cfg: &AnnotationConfig) -> Result<Self> {
        let reference = bundle.poses.first().ok_or_else(|| SceneError::Inconsistent("scene has no frames".into()))?;
        let poses: Vec<CameraPose> = bundle.poses.iter().map(|p| p.relative_to(reference)).collect();
        let up = (reference.rotation.transpose() * bundle.up_world()).normalize();

        let mut ids: Vec<u16> = bundle.file.instances.keys().filter_map(|k| k.parse().ok()).collect();
        ids.sort_unstable();
        let mut instances = BTreeMap::new();
        for id in ids {
            let class_name = bundle.class_of(id).unwrap_or_default().to_string();
            let frames: Vec<usize> = bundle.masks.iter().enumerate().filter(|(_, m)| m.data.contains(&id)).map(|(t, _)| t).collect();
            let points = instance_points(&depth, &bundle.masks, &bundle.intrinsics, &poses, id, cfg.pixel_stride);
            if points.is_empty() {
                log::debug!("instance {id} ({class_name}) has no valid points; skipped");
                continue;
            }
            let cloud = PointCloud::new(points, FrameTag::Canonical)?;
            instances.insert(id, Instance { id, class_name, cloud, frames });
        }

        let (p95_depth, median_depth) = depth_stats(&depth).ok_or(SceneError::Depth(depth::DepthError::EmptyDepth))?;
        let max_object_extent = instances
            .values()
            .filter(|i| !i.structural() && i.cloud.len() >= 3)
            .filter_map(|i| geometry::object_dims(&i.cloud, &up).ok())
            .map(|d| d.longest())
            .fold(0.0, f64::max);
        let stats = SceneStats {
            p95_depth,
            median_depth,
            valid_depth_count: depth.valid_count(),
            max_object_extent,
            camera_height: bundle.file.meta.camera_height_m,
        };

        let mut detections = bundle.detections.clone();
        detections.sort_by_key(|a| a.frame);
        let tracks = tracking::associate(&detections, &cfg.assoc)?;
        Ok(SceneAnnotations {
            scene_id: bundle.file.scene_id.clone(),
            source: bundle.file.meta.source.clone(),
            indoor: bundle.file.meta.indoor,
            intrinsics: bundle.intrinsics,
            poses,
            up,
            depth,
            masks: bundle.masks.clone(),
            instances,
            detections,
            tracks,
            keypoints: bundle.keypoints.clone(),
            stats,
            assoc: cfg.assoc.clone(),
            pixel_stride: cfg.pixel_stride,
        })
    }

    pub fn objects(&self) -> impl Iterator<Item = &Instance> {
        self.instances.values().filter(|i| !i.structural())
    }

    pub fn class_of(&self, id: u16) -> Option<&str> {
        self.instances.get(&id).map(|i| i.class_name.as_str())
    }

    /// Number of non-structural instances per class.
    pub fn class_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for i in self.objects() {
            *counts.entry(i.class_name.as_str()).or_insert(0) += 1;
        }
        counts
    }

    /// Canonical points of `id` at keypoint pixels of frame `t`, in keypoint
    /// order. `None` if any keypoint has no valid depth.
    pub fn keypoint_cloud(&self, id: u16, t: usize) -> Option<Vec<Vec3>> {
        let row = self.keypoints.iter().find(|k| k.instance == id && k.frame == t)?;
        row.points
            .iter()
            .map(|&[u, v]| {
                let (x, y) = (u.round(), v.round());
                if x < 0.0 || y < 0.0 {
                    return None;
                }
                lift_pixel(&self.depth, &self.intrinsics, &self.poses[t], t, x as usize, y as usize)
            })
            .collect()
    }

    pub fn wall_normals(&self) -> Vec<Vec3> {
        self.instances.values().filter(|i| i.class_name == "wall").filter_map(|i| plane_normal(&i.cloud)).collect()
    }

    pub fn floor_cloud(&self) -> Option<PointCloud> {
        let pts: Vec<Vec3> = self.instances.values().filter(|i| i.class_name == "floor").flat_map(|i| i.cloud.points.iter().copied()).collect();
        PointCloud::new(pts, FrameTag::Canonical).ok()
    }
}

pub fn write_prepared(dir: &Path, depth: &DepthSequence, stats: &serde_json::Value) -> Result<()> {
    let out = dir.join(PREPARED_DIR);
    formats::write_svdf(&out.join(CONSISTENT_DEPTH_FILE), &Tensor3::from_depth(depth))?;
    formats::write_bytes(&out.join(STATS_FILE), (formats::to_sorted_json_pretty(stats) + "\n").as_bytes())?;
    Ok(())
}
