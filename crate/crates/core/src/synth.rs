//! Deterministic synthetic scenes: oriented boxes ray-cast into depth,
//! instance masks, detections and keypoints, written in the scene-directory
//! layout.

use std::path::Path;

use nalgebra::Matrix3;
use serde_json::{json, Value};

use crate::depth::DepthSequence;
use crate::formats::{self, FormatError, KeypointRow, Mask16, Tensor3};
use crate::geometry::{CameraIntrinsics, CameraPose, Vec3};
use crate::rng::SplitMix64;
use crate::tracking::BBox;

/// A box with a yaw about the world vertical (world y points down).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub id: u16,
    pub class_name: String,
    pub center: Vec3,
    /// Full extents along the box's local x, y, z.
    pub size: Vec3,
    pub yaw_deg: f64,
    /// Yaw added per frame; non-zero objects get keypoints.
    pub spin_deg: f64,
    /// Whether the detector reports this object.
    pub detectable: bool,
}

impl SynthObject {
    pub fn new(id: u16, class_name: &str, center: [f64; 3], size: [f64; 3], yaw_deg: f64) -> Self {
        SynthObject {
            id,
            class_name: class_name.to_string(),
            center: Vec3::from(center),
            size: Vec3::from(size),
            yaw_deg,
            spin_deg: 0.0,
            detectable: !crate::scene::is_structural(class_name),
        }
    }

    /// Box standing on a floor at world height `floor_y`.
    pub fn on_floor(id: u16, class_name: &str, x: f64, z: f64, size: [f64; 3], yaw_deg: f64, floor_y: f64) -> Self {
        Self::new(id, class_name, [x, floor_y - size[1] / 2.0, z], size, yaw_deg)
    }

    fn rotation(&self, frame: usize) -> Matrix3<f64> {
        yaw((self.yaw_deg + self.spin_deg * frame as f64).to_radians())
    }

    /// Entry distance of a world ray, if it hits.
    fn intersect(&self, origin: &Vec3, dir: &Vec3, frame: usize) -> Option<f64> {
        let r = self.rotation(frame);
        let o = r.transpose() * (origin - self.center);
        let d = r.transpose() * dir;
        let half = self.size / 2.0;
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k].abs() > half[k] {
                    return None;
                }
                continue;
            }
            let a = (-half[k] - o[k]) / d[k];
            let b = (half[k] - o[k]) / d[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t0 > 1e-9).then_some(t0)
    }

    /// World position of a point given in box-local coordinates scaled by
    /// the half extents.
    fn local_point(&self, unit: [f64; 3], frame: usize) -> Vec3 {
        let half = self.size / 2.0;
        self.center + self.rotation(frame) * Vec3::new(unit[0] * half.x, unit[1] * half.y, unit[2] * half.z)
    }
}

fn yaw(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn pitch_down(a: f64) -> Matrix3<f64> {
    let (s, c) = (-a).sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// World-from-camera pose with a yaw and a downward pitch.
pub fn camera_pose(position: [f64; 3], yaw_deg: f64, pitch_deg: f64) -> CameraPose {
    let r = yaw(yaw_deg.to_radians()) * pitch_down(pitch_deg.to_radians());
    CameraPose::new(r, Vec3::from(position)).expect("rotation built from angles is orthonormal")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub scene_id: String,
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<CameraPose>,
    pub objects: Vec<SynthObject>,
    /// Relative standard deviation of multiplicative depth noise.
    pub depth_noise: f64,
    /// Low-score spurious detections per frame.
    pub false_positives: usize,
    pub seed: u64,
    pub source: String,
    pub indoor: bool,
    pub camera_height: Option<f64>,
}

/// Everything rendered for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub depth: DepthSequence,
    pub depth_ref: DepthSequence,
    pub masks: Vec<Mask16>,
    pub detections: Vec<Value>,
    pub keypoints: Vec<KeypointRow>,
}

/// Fraction of the top face (per half extent) covered by keypoints.
const KEYPOINT_INSET: f64 = 0.6;
const KEYPOINTS: [[f64; 3]; 5] = [
    [-KEYPOINT_INSET, -1.0, -KEYPOINT_INSET],
    [KEYPOINT_INSET, -1.0, -KEYPOINT_INSET],
    [KEYPOINT_INSET, -1.0, KEYPOINT_INSET],
    [-KEYPOINT_INSET, -1.0, KEYPOINT_INSET],
    [0.3, -1.0, 0.0],
];

impl SynthScene {
    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    fn ray(&self, pose: &CameraPose, x: usize, y: usize) -> Vec3 {
        let i = &self.intrinsics;
        pose.rotation * Vec3::new((x as f64 - i.cx) / i.fx, (y as f64 - i.cy) / i.fy, 1.0)
    }

    /// Nearest hit at pixel `(x, y)` of frame `t`: camera depth and id.
    fn cast(&self, t: usize, x: usize, y: usize) -> Option<(f64, u16)> {
        let pose = &self.poses[t];
        let dir = self.ray(pose, x, y);
        let mut best: Option<(f64, u16)> = None;
        for o in &self.objects {
            if let Some(d) = o.intersect(&pose.translation, &dir, t) {
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, o.id));
                }
            }
        }
        best
    }

    pub fn render(&self) -> Rendered {
        let (w, h, frames) = (self.intrinsics.width as usize, self.intrinsics.height as usize, self.frames());
        let mut truth = vec![f64::NAN; frames * h * w];
        let mut masks = Vec::with_capacity(frames);
        for t in 0..frames {
            let mut data = vec![0u16; h * w];
            for y in 0..h {
                for x in 0..w {
                    if let Some((d, id)) = self.cast(t, x, y) {
                        truth[(t * h + y) * w + x] = d;
                        data[y * w + x] = id;
                    }
                }
            }
            masks.push(Mask16::new(w, h, data).expect("sized buffer"));
        }

        let mut rng = SplitMix64::new(self.seed);
        let noisy: Vec<f64> = truth.iter().map(|&d| if d.is_nan() { d } else { d * (1.0 + self.depth_noise * rng.normal()) }).collect();
        // Round through f32 so in-memory values equal what the files hold.
        let to_f32 = |v: Vec<f64>| v.into_iter().map(|d| d as f32 as f64).collect::<Vec<_>>();
        let depth = DepthSequence::from_values(frames, h, w, to_f32(noisy)).expect("shape");
        let depth_ref = DepthSequence::from_values(frames, h, w, to_f32(truth)).expect("shape");

        let mut detections = Vec::new();
        for (t, mask) in masks.iter().enumerate() {
            for o in self.objects.iter().filter(|o| o.detectable) {
                if let Some([x1, y1, x2, y2]) = crate::scene::mask_bbox(mask, o.id) {
                    detections.push(json!({
                        "frame": t,
                        "class_name": o.class_name,
                        "bbox": {"x1": x1, "y1": y1, "x2": x2, "y2": y2},
                        "score": 0.9,
                        "instance": o.id,
                    }));
                }
            }
            for _ in 0..self.false_positives {
                let x1 = rng.below(w as u64 - 20) as f64;
                let y1 = rng.below(h as u64 - 20) as f64;
                let bw = 10.0 + rng.below(10) as f64;
                detections.push(json!({
                    "frame": t,
                    "class_name": "clutter",
                    "bbox": {"x1": x1, "y1": y1, "x2": x1 + bw, "y2": y1 + bw},
                    "score": 0.2,
                }));
            }
        }

        let mut keypoints = Vec::new();
        for o in self.objects.iter().filter(|o| o.spin_deg != 0.0) {
            for t in 0..frames {
                if let Some(points) = self.visible_keypoints(o, t, &masks[t]) {
                    keypoints.push(KeypointRow { frame: t, instance: o.id, points });
                }
            }
        }
        Rendered { depth, depth_ref, masks, detections, keypoints }
    }

    /// Keypoint pixels (rounded) when every one lands on the object itself.
    fn visible_keypoints(&self, o: &SynthObject, t: usize, mask: &Mask16) -> Option<Vec<[f64; 2]>> {
        let pose = &self.poses[t];
        let i = &self.intrinsics;
        KEYPOINTS
            .iter()
            .map(|unit| {
                let p = pose.world_to_camera(&o.local_point(*unit, t));
                if p.z <= 0.0 {
                    return None;
                }
                let (u, v) = ((i.fx * p.x / p.z + i.cx).round(), (i.fy * p.y / p.z + i.cy).round());
                if u < 0.0 || v < 0.0 || u >= i.width as f64 || v >= i.height as f64 {
                    return None;
                }
                (mask.get(u as usize, v as usize) == o.id).then_some([u, v])
            })
            .collect()
    }

    pub fn scene_json(&self) -> Value {
        let i = &self.intrinsics;
        let poses: Vec<Value> = self
            .poses
            .iter()
            .map(|p| {
                let (r, t) = p.to_row_major();
                json!({"R": r, "t": t})
            })
            .collect();
        let instances: serde_json::Map<String, Value> =
            self.objects.iter().map(|o| (o.id.to_string(), json!({"class": o.class_name}))).collect();
        let mut meta = json!({"source": self.source, "indoor": self.indoor});
        if let Some(hgt) = self.camera_height {
            meta["camera_height_m"] = json!(hgt);
        }
        json!({
            "scene_id": self.scene_id,
            "intrinsics": {"fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy, "width": i.width, "height": i.height},
            "poses": poses,
            "files": {
                "depth": "depth.svdf",
                "depth_ref": "depth_ref.svdf",
                "masks": "masks",
                "detections": "detections.jsonl",
                "keypoints": "keypoints.jsonl",
            },
            "meta": meta,
            "instances": instances,
        })
    }

    /// Render and write the scene directory.
    pub fn write(&self, dir: &Path) -> Result<(), FormatError> {
        let r = self.render();
        formats::write_bytes(&dir.join("scene.json"), (formats::to_sorted_json_pretty(&self.scene_json()) + "\n").as_bytes())?;
        formats::write_svdf(&dir.join("depth.svdf"), &Tensor3::from_depth(&r.depth))?;
        formats::write_svdf(&dir.join("depth_ref.svdf"), &Tensor3::from_depth(&r.depth_ref))?;
        for (t, m) in r.masks.iter().enumerate() {
            formats::write_pgm(&dir.join("masks").join(formats::mask_file_name(t)), m)?;
        }
        formats::write_jsonl(&dir.join("detections.jsonl"), &r.detections)?;
        formats::write_jsonl(&dir.join("keypoints.jsonl"), &r.keypoints)?;
        Ok(())
    }
}

/// Ground-truth box of an object as an image-space bbox helper for tests.
pub fn bbox_of(mask: &Mask16, id: u16) -> Option<BBox> {
    crate::scene::mask_bbox(mask, id).map(|[x1, y1, x2, y2]| BBox { x1, y1, x2, y2 })
}

const FLOOR_Y: f64 = 1.3;

/// A furnished room seen by a camera 1.3 m above the floor that pans right.
pub fn indoor_room() -> SynthScene {
    let f = FLOOR_Y;
    let table_yaw = 8.0;
    let mut objects = vec![
        SynthObject::new(1, "floor", [0.0, f + 0.05, 2.0], [6.0, 0.1, 7.0], 0.0),
        SynthObject::new(2, "wall", [-2.55, 0.0, 2.0], [0.1, 2.6, 7.0], 0.0),
        SynthObject::new(3, "wall", [2.55, 0.0, 2.0], [0.1, 2.6, 7.0], 0.0),
        SynthObject::new(4, "wall", [0.0, 0.0, 4.65], [5.2, 2.6, 0.1], 0.0),
        SynthObject::on_floor(10, "table", 0.2, 2.6, [1.2, 0.75, 0.8], table_yaw, f),
        SynthObject::new(11, "cup", [-0.05, f - 0.75 - 0.05, 2.5], [0.08, 0.1, 0.08], 0.0),
        SynthObject::new(12, "book", [0.45, f - 0.75 - 0.02, 2.7], [0.26, 0.04, 0.19], table_yaw),
        SynthObject::new(13, "box", [0.45, f - 0.79 - 0.03, 2.7], [0.2, 0.06, 0.15], table_yaw),
        SynthObject::on_floor(14, "chair", -0.3, 2.05, [0.45, 0.9, 0.45], 20.0, f),
        SynthObject::on_floor(15, "chair", 1.25, 2.3, [0.45, 0.9, 0.45], -15.0, f),
        SynthObject::on_floor(16, "sofa", -1.35, 3.9, [2.0, 0.8, 0.9], 0.0, f),
        SynthObject::new(17, "picture", [0.6, 0.0, 4.59], [0.6, 0.4, 0.02], 0.0),
        SynthObject::on_floor(18, "lamp", 2.1, 4.3, [0.3, 1.5, 0.3], 0.0, f),
        SynthObject::on_floor(19, "cabinet", 2.25, 2.5, [0.5, 1.0, 0.9], 0.0, f),
        SynthObject::on_floor(20, "basket", 0.55, 1.9, [0.4, 0.3, 0.4], 10.0, f),
        SynthObject::on_floor(23, "fridge", 2.25, 1.75, [0.5, 1.7, 0.5], 0.0, f),
        SynthObject::on_floor(22, "dresser", 2.15, 3.5, [0.7, 0.8, 1.0], 0.0, f),
        SynthObject::on_floor(21, "plant", -2.0, 2.8, [0.35, 0.7, 0.35], 0.0, f),
    ];
    objects.iter_mut().find(|o| o.id == 20).expect("basket").spin_deg = 2.5;
    let frames = 16;
    let poses = (0..frames)
        .map(|t| {
            let s = t as f64 / (frames - 1) as f64;
            camera_pose([0.6 * s, 0.0, 0.1 * s], 30.0 * s, 15.0)
        })
        .collect();
    SynthScene {
        scene_id: "indoor_room".into(),
        intrinsics: CameraIntrinsics::new(170.0, 170.0, 99.5, 74.5, 200, 150).expect("valid intrinsics"),
        poses,
        objects,
        depth_noise: 0.002,
        false_positives: 1,
        seed: 7,
        source: "scan".into(),
        indoor: true,
        camera_height: Some(FLOOR_Y),
    }
}

/// Small objects on a table, viewed from 0.6 m above the table top.
pub fn tabletop() -> SynthScene {
    let top = 0.6;
    let objects = vec![
        SynthObject::new(1, "floor", [0.0, top + 0.75, 1.0], [4.0, 0.1, 4.0], 0.0),
        SynthObject::new(10, "table", [0.0, top + 0.05, 0.9], [1.6, 0.1, 1.0], 0.0),
        SynthObject::new(11, "mug", [-0.25, top - 0.05, 0.75], [0.09, 0.1, 0.09], 0.0),
        SynthObject::new(12, "bowl", [0.2, top - 0.035, 0.85], [0.16, 0.07, 0.16], 0.0),
        SynthObject::new(13, "phone", [0.0, top - 0.005, 0.62], [0.08, 0.01, 0.16], 25.0),
        SynthObject::new(14, "bottle", [-0.05, top - 0.12, 1.05], [0.07, 0.24, 0.07], 0.0),
        SynthObject::new(15, "laptop", [0.35, top - 0.01, 1.15], [0.34, 0.02, 0.24], -10.0),
        SynthObject::new(16, "apple", [-0.35, top - 0.04, 1.0], [0.08, 0.08, 0.08], 0.0),
    ];
    let frames = 16;
    let poses = (0..frames)
        .map(|t| {
            let s = t as f64 / (frames - 1) as f64;
            camera_pose([-0.1 + 0.3 * s, 0.0, 0.1 * s], -4.0 + 8.0 * s, 40.0)
        })
        .collect();
    SynthScene {
        scene_id: "tabletop".into(),
        intrinsics: CameraIntrinsics::new(170.0, 170.0, 99.5, 74.5, 200, 150).expect("valid intrinsics"),
        poses,
        objects,
        depth_noise: 0.002,
        false_positives: 1,
        seed: 11,
        source: "tabletop".into(),
        indoor: false,
        camera_height: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::back_project;

    #[test]
    fn ray_hits_box_front_face() {
        let o = SynthObject::new(1, "box", [0.0, 0.0, 5.0], [2.0, 2.0, 2.0], 0.0);
        let d = o.intersect(&Vec3::zeros(), &Vec3::z(), 0).unwrap();
        assert!((d - 4.0).abs() < 1e-12);
        assert!(o.intersect(&Vec3::zeros(), &Vec3::x(), 0).is_none());
        assert!(o.intersect(&Vec3::new(0.0, 0.0, 10.0), &Vec3::z(), 0).is_none());
    }

    #[test]
    fn rendered_depth_back_projects_onto_surfaces() {
        let mut scene = indoor_room();
        scene.poses.truncate(1);
        scene.depth_noise = 0.0;
        let r = scene.render();
        let wall = scene.objects.iter().find(|o| o.id == 4).unwrap();
        let front = wall.center.z - wall.size.z / 2.0;
        let mut checked = 0;
        for y in (0..150).step_by(7) {
            for x in (0..200).step_by(7) {
                if r.masks[0].get(x, y) == 4 {
                    let d = r.depth_ref.get(0, y, x).unwrap();
                    let p = scene.poses[0].camera_to_world(&back_project((x as f64, y as f64), d, &scene.intrinsics).unwrap());
                    assert!((p.z - front).abs() < 1e-5, "{p:?}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn poses_are_valid_and_start_at_identity_yaw() {
        let s = indoor_room();
        for p in &s.poses {
            p.validate().unwrap();
        }
        assert_eq!(s.poses[0].translation, Vec3::zeros());
        // Frame 0 looks along +z tilted down.
        let fwd = s.poses[0].rotation * Vec3::z();
        assert!(fwd.x.abs() < 1e-12 && fwd.y > 0.0 && fwd.z > 0.0);
    }
}
