//! Pinhole camera geometry and point-cloud measurements.
//!
//! Conventions: camera axes are x right, y down, z forward. A [`CameraPose`]
//! is world-from-camera (`p_world = R * p_cam + t`). The canonical view space
//! of a scene is the camera frame of its reference (first) frame.

use nalgebra::{Matrix3, Point2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("rotation is not orthonormal with det +1")]
    DegeneratePose,
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("point clouds are in different frames ({0:?} vs {1:?})")]
    FrameMismatch(FrameTag, FrameTag),
    #[error("point counts differ ({0} vs {1})")]
    CountMismatch(usize, usize),
    #[error("cross-covariance is rank deficient")]
    DegenerateCovariance,
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point cloud is empty or has non-finite coordinates")]
    InvalidCloud,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < f64::from(self.width)) || !(self.cy >= 0.0 && self.cy < f64::from(self.height)) {
            return Err(GeometryError::InvalidIntrinsics("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < f64::from(self.width) && v < f64::from(self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    /// Build from a row-major 3x3 rotation and a translation.
    pub fn from_row_major(r: &[f64; 9], t: &[f64; 3]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(r), Vec3::new(t[0], t[1], t[2]))
    }

    pub fn to_row_major(&self) -> ([f64; 9], [f64; 3]) {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = self.rotation[(i, j)];
            }
        }
        (r, [self.translation.x, self.translation.y, self.translation.z])
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !r.iter().all(|x| x.is_finite()) || ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeometryError::DegeneratePose);
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::DegeneratePose);
        }
        Ok(())
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Pose of this camera expressed in another camera's frame.
    pub fn relative_to(&self, reference: &CameraPose) -> CameraPose {
        let rt = reference.rotation.transpose();
        CameraPose { rotation: rt * self.rotation, translation: rt * (self.translation - reference.translation) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameTag {
    Camera,
    World,
    Canonical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub frame: FrameTag,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, frame: FrameTag) -> Result<Self> {
        if points.is_empty() || !points.iter().all(|p| p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::InvalidCloud);
        }
        Ok(Self { points, frame })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        sum / self.points.len() as f64
    }

    /// Largest pairwise distance bound: twice the max distance to the centroid.
    pub fn radius(&self) -> f64 {
        let c = self.centroid();
        self.points.iter().map(|p| (p - c).norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectDims {
    pub height: f64,
    pub width: f64,
    pub length: f64,
}

impl ObjectDims {
    pub fn longest(&self) -> f64 {
        self.height.max(self.width).max(self.length)
    }
}

/// Lift a pixel with metric depth into the camera frame.
pub fn back_project(pixel: (f64, f64), depth: f64, intr: &CameraIntrinsics) -> Result<Vec3> {
    let (u, v) = pixel;
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    if !intr.contains(u, v) {
        return Err(GeometryError::PixelOutOfBounds { u, v, width: intr.width, height: intr.height });
    }
    Ok(Vec3::new((u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth))
}

/// Perspective projection of a camera-frame point.
pub fn project(p: &Vec3, intr: &CameraIntrinsics) -> Result<(f64, f64)> {
    if !(p.z > 0.0) {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok((intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy))
}

/// Express a world point in the reference camera's frame.
pub fn to_canonical(p: &Vec3, reference: &CameraPose) -> Result<Vec3> {
    reference.validate()?;
    Ok(reference.world_to_camera(p))
}

pub fn from_canonical(p: &Vec3, reference: &CameraPose) -> Result<Vec3> {
    reference.validate()?;
    Ok(reference.camera_to_world(p))
}

/// Orthonormal basis `(e1, e2)` of the plane orthogonal to `up`.
///
/// `e1` is +x projected onto the plane (or +z when `up` is along x), and
/// `e2 = up x e1`.
pub fn plane_basis(up: &Vec3) -> (Vec3, Vec3) {
    let up = up.normalize();
    let x = Vec3::x();
    let seed = if (x - up * up.dot(&x)).norm() > 1e-6 { x } else { Vec3::z() };
    let e1 = (seed - up * up.dot(&seed)).normalize();
    let e2 = up.cross(&e1);
    (e1, e2)
}

fn cross2(o: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Counter-clockwise convex hull (monotone chain). Collinear points are
/// dropped; degenerate inputs return fewer than three vertices.
pub fn convex_hull_2d(points: &[Point2<f64>]) -> Vec<Point2<f64>> {
    let mut pts: Vec<Point2<f64>> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2<f64>> = Vec::with_capacity(2 * pts.len());
    // Lower hull left to right, then upper hull right to left.
    for p in &pts {
        while hull.len() >= 2 && cross2(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower_len = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross2(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(poly: &[Point2<f64>]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        twice += a.x * b.y - b.x * a.y;
    }
    twice.abs() / 2.0
}

/// Principal direction of a 2D point set from the closed-form 2x2
/// covariance eigen-decomposition. Equal eigenvalues select +x.
pub fn principal_axis_2d(points: &[Point2<f64>]) -> Vector2<f64> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |acc, p| acc + p.coords) / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = p.coords - mean;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let scale = (sxx + syy).max(f64::MIN_POSITIVE);
    if (sxx - syy).abs() <= 1e-12 * scale && sxy.abs() <= 1e-12 * scale {
        return Vector2::x();
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let axis = Vector2::new(theta.cos(), theta.sin());
    // atan2 gives theta in (-pi/2, pi/2], so axis.x >= 0 already; keep the
    // representative pointing toward +x.
    if axis.x < 0.0 { -axis } else { axis }
}

/// Height along `up`, then width/length along the principal axes of the
/// footprint (convex hull of the points projected onto the plane normal to
/// `up`). Width is always the larger of the two.
pub fn object_dims(cloud: &PointCloud, up: &Vec3) -> Result<ObjectDims> {
    if cloud.len() < 3 {
        return Err(GeometryError::TooFewPoints { need: 3, got: cloud.len() });
    }
    let up_n = up.normalize();
    let (e1, e2) = plane_basis(&up_n);

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut flat = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        let h = p.dot(&up_n);
        lo = lo.min(h);
        hi = hi.max(h);
        flat.push(Point2::new(p.dot(&e1), p.dot(&e2)));
    }
    let height = hi - lo;

    let axis = principal_axis_2d(&flat);
    let perp = Vector2::new(-axis.y, axis.x);
    let hull = convex_hull_2d(&flat);
    let extent = |dir: &Vector2<f64>| {
        let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            let s = p.coords.dot(dir);
            a = a.min(s);
            b = b.max(s);
        }
        b - a
    };
    let along = extent(&axis);
    let across = extent(&perp);
    Ok(ObjectDims { height, width: along.max(across), length: along.min(across) })
}

fn check_frames(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.frame != b.frame {
        return Err(GeometryError::FrameMismatch(a.frame, b.frame));
    }
    Ok(())
}

/// Distance between the arithmetic means of two clouds.
pub fn centroid_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_frames(a, b)?;
    Ok((a.centroid() - b.centroid()).norm())
}

/// Exact minimum pairwise distance (exhaustive).
pub fn closest_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_frames(a, b)?;
    let mut best = f64::INFINITY;
    for p in &a.points {
        for q in &b.points {
            let d = (p - q).norm_squared();
            if d < best {
                best = d;
            }
        }
    }
    Ok(best.sqrt())
}

/// Floor area of a room from its floor points.
///
/// The floor is projected onto the plane orthogonal to `up` and measured by
/// its convex hull. When at least three distinct wall normals are supplied,
/// the hull is replaced by the rectangle spanned along the two dominant
/// horizontal wall directions.
pub fn room_footprint(floor: &PointCloud, wall_normals: &[Vec3], up: &Vec3) -> Result<f64> {
    if floor.len() < 10 {
        return Err(GeometryError::TooFewPoints { need: 10, got: floor.len() });
    }
    let up_n = up.normalize();
    let (e1, e2) = plane_basis(&up_n);
    let flat: Vec<Point2<f64>> = floor.points.iter().map(|p| Point2::new(p.dot(&e1), p.dot(&e2))).collect();
    let hull = convex_hull_2d(&flat);

    if let Some((d1, d2)) = dominant_wall_directions(wall_normals, &e1, &e2) {
        let extent = |dir: &Vector2<f64>| {
            let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in &hull {
                let s = p.coords.dot(dir);
                a = a.min(s);
                b = b.max(s);
            }
            if hull.is_empty() { 0.0 } else { b - a }
        };
        if hull.len() < 3 {
            return Ok(0.0);
        }
        return Ok(extent(&d1) * extent(&d2));
    }
    Ok(polygon_area(&hull))
}

/// Two dominant horizontal wall directions, or `None` when fewer than three
/// distinct normals are present or none of them is horizontal.
fn dominant_wall_directions(normals: &[Vec3], e1: &Vec3, e2: &Vec3) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let mut distinct: Vec<Vec3> = Vec::new();
    for n in normals {
        let n = n.normalize();
        if !n.iter().all(|c| c.is_finite()) {
            continue;
        }
        if distinct.iter().all(|d| (d - n).norm() > 1e-6) {
            distinct.push(n);
        }
    }
    if distinct.len() < 3 {
        return None;
    }
    // Horizontal directions folded to [0, pi); cluster within 10 degrees.
    let tol = 10f64.to_radians();
    let mut clusters: Vec<(f64, usize)> = Vec::new();
    for n in &distinct {
        let h = Vector2::new(n.dot(e1), n.dot(e2));
        if h.norm() < 0.5 {
            continue;
        }
        let angle = h.y.atan2(h.x).rem_euclid(std::f64::consts::PI);
        let slot = clusters.iter_mut().find(|(a, _)| {
            let d = (angle - *a).abs();
            d.min(std::f64::consts::PI - d) < tol
        });
        match slot {
            Some((_, count)) => *count += 1,
            None => clusters.push((angle, 1)),
        }
    }
    if clusters.is_empty() {
        return None;
    }
    // Stable: highest count first, then first-seen.
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by(|&a, &b| clusters[b].1.cmp(&clusters[a].1).then(a.cmp(&b)));
    let a1 = clusters[order[0]].0;
    let d1 = Vector2::new(a1.cos(), a1.sin());
    let d2 = match order.get(1) {
        Some(&i) => {
            let a2 = clusters[i].0;
            Vector2::new(a2.cos(), a2.sin())
        }
        None => Vector2::new(-d1.y, d1.x),
    };
    Some((d1, d2))
}

/// Least-squares rigid rotation taking `from` onto `to` (Kabsch), with
/// correspondence by index.
pub fn kabsch_rotation(from: &PointCloud, to: &PointCloud) -> Result<Matrix3<f64>> {
    if from.len() != to.len() {
        return Err(GeometryError::CountMismatch(from.len(), to.len()));
    }
    if from.len() < 3 {
        return Err(GeometryError::TooFewPoints { need: 3, got: from.len() });
    }
    let ca = from.centroid();
    let cb = to.centroid();
    let mut h = Matrix3::zeros();
    for (p, q) in from.points.iter().zip(&to.points) {
        h += (p - ca) * (q - cb).transpose();
    }
    let svd = h.svd(true, true);
    let s = svd.singular_values;
    let smax = s.max();
    let mut sorted = [s[0], s[1], s[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(smax > 0.0) || sorted[1] <= 1e-12 * smax {
        return Err(GeometryError::DegenerateCovariance);
    }
    let u = svd.u.ok_or(GeometryError::DegenerateCovariance)?;
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateCovariance)?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    Ok(v * correction * u.transpose())
}

/// Angle of a rotation matrix in degrees, in `[0, 180]`.
///
/// Evaluated as `atan2(|axis|, trace - 1)`, which agrees with
/// `acos((trace - 1) / 2)` and stays accurate near 0 and 180 degrees.
pub fn rotation_matrix_angle(r: &Matrix3<f64>) -> f64 {
    let axis = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let trace = r.trace();
    axis.norm().atan2(trace - 1.0).to_degrees()
}

/// Rotation angle (degrees) of the best rigid alignment between two
/// index-corresponding observations of the same object.
pub fn rotation_angle(t0: &PointCloud, t1: &PointCloud) -> Result<f64> {
    check_frames(t0, t1)?;
    let r = kabsch_rotation(t0, t1)?;
    Ok(rotation_matrix_angle(&r))
}
