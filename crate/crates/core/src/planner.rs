//! Collision-free manipulation paths over axis-aligned obstacles.
//!
//! Everything lives in the canonical (reference camera) frame: x right,
//! y down, z forward away from the camera.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, CameraPose, GeometryError, Vec3};
use crate::rng::SplitMix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
    #[error("start lies inside an obstacle")]
    StartInCollision,
    #[error("goal lies inside an obstacle")]
    GoalInCollision,
    #[error("no path found within {0} iterations")]
    Infeasible(usize),
    #[error("path segment {0} has zero length")]
    ZeroLengthSegment(usize),
    #[error("path needs at least {0} waypoints")]
    TooFewWaypoints(usize),
    #[error("invalid plan config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, PlanError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb3 {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min: [min.x, min.y, min.z], max: [max.x, max.y, max.z] }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut lo, mut hi) = (*first, *first);
        for p in it {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Some(Self::new(lo, hi))
    }

    pub fn min_v(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn max_v(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn center(&self) -> Vec3 {
        (self.min_v() + self.max_v()) / 2.0
    }

    pub fn half_extents(&self) -> Vec3 {
        (self.max_v() - self.min_v()) / 2.0
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|k| self.min[k] <= self.max[k] && self.min[k].is_finite() && self.max[k].is_finite())
    }

    /// Minkowski sum with a cube of half-side `r`.
    pub fn inflated(&self, r: f64) -> Self {
        let d = Vec3::repeat(r);
        Self::new(self.min_v() - d, self.max_v() + d)
    }

    /// Closed-box membership.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Strict interior membership.
    pub fn contains_strict(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] > self.min[k] && p[k] < self.max[k])
    }

    pub fn union(&self, other: &Aabb3) -> Aabb3 {
        Aabb3::new(self.min_v().inf(&other.min_v()), self.max_v().sup(&other.max_v()))
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|k| (self.max[k] - self.min[k]).max(0.0)).product()
    }

    pub fn intersection(&self, other: &Aabb3) -> Option<Aabb3> {
        let lo = self.min_v().sup(&other.min_v());
        let hi = self.max_v().inf(&other.max_v());
        (0..3).all(|k| lo[k] <= hi[k]).then(|| Aabb3::new(lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Left,
    Right,
    Front,
    Back,
    Above,
}

impl Relation {
    pub const ALL: [Relation; 5] = [Relation::Left, Relation::Right, Relation::Front, Relation::Back, Relation::Above];

    /// Unit direction in the canonical frame.
    pub fn axis(&self) -> Vec3 {
        match self {
            Relation::Left => -Vec3::x(),
            Relation::Right => Vec3::x(),
            Relation::Above => -Vec3::y(),
            Relation::Front => -Vec3::z(),
            Relation::Back => Vec3::z(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Front => "front",
            Relation::Back => "back",
            Relation::Above => "above",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self> {
        Relation::ALL
            .into_iter()
            .find(|r| r.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| PlanError::UnknownRelation(s.to_string()))
    }
}

/// Goal position next to `target` on the side named by `relation`.
pub fn relation_offset(target: &Aabb3, relation: Relation, clearance: f64) -> Vec3 {
    let axis = relation.axis();
    let mut goal = target.center();
    // Start from the face coordinate itself so a zero clearance lands exactly
    // on the boundary rather than an ulp inside.
    for k in 0..3 {
        if axis[k] > 0.0 {
            goal[k] = target.max[k] + clearance.max(0.0);
        } else if axis[k] < 0.0 {
            goal[k] = target.min[k] - clearance.max(0.0);
        }
    }
    goal
}

/// Slab test for segment/box intersection; touching the boundary is a hit.
pub fn segment_hits_aabb(p0: &Vec3, p1: &Vec3, bx: &Aabb3) -> bool {
    segment_entry(p0, p1, bx).is_some()
}

/// Entry parameter `t` in `[0, 1]` of the segment into the closed box.
fn segment_entry(p0: &Vec3, p1: &Vec3, bx: &Aabb3) -> Option<f64> {
    let d = p1 - p0;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..3 {
        if d[k] == 0.0 {
            if p0[k] < bx.min[k] || p0[k] > bx.max[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (mut a, mut b) = ((bx.min[k] - p0[k]) * inv, (bx.max[k] - p0[k]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    Some(t0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub step: f64,
    pub max_iters: usize,
    pub goal_bias: f64,
    pub clearance: f64,
    pub seed: u64,
}

impl PlanConfig {
    /// Defaults scaled to a scene of the given diameter.
    pub fn for_scene(diameter: f64, seed: u64) -> Self {
        Self { step: 0.05 * diameter, max_iters: 5000, goal_bias: 0.1, clearance: 0.02, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(PlanError::InvalidConfig("step must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.goal_bias) {
            return Err(PlanError::InvalidConfig("goal_bias must be in [0, 1]".into()));
        }
        if !(self.clearance >= 0.0) {
            return Err(PlanError::InvalidConfig("clearance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path3 {
    pub waypoints: Vec<[f64; 3]>,
}

impl Path3 {
    pub fn from_points(points: &[Vec3]) -> Self {
        Self { waypoints: points.iter().map(|p| [p.x, p.y, p.z]).collect() }
    }

    pub fn points(&self) -> Vec<Vec3> {
        self.waypoints.iter().map(|w| Vec3::from(*w)).collect()
    }

    pub fn length(&self) -> f64 {
        self.points().windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }
}

fn collision_free(p0: &Vec3, p1: &Vec3, obstacles: &[Aabb3]) -> bool {
    obstacles.iter().all(|b| !segment_hits_aabb(p0, p1, b))
}

/// Greedy shortcutting: from each kept waypoint jump to the farthest later
/// waypoint reachable by a collision-free straight segment.
pub fn shortcut(points: &[Vec3], obstacles: &[Aabb3]) -> Vec<Vec3> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut out = vec![points[0]];
    let mut i = 0;
    while i < points.len() - 1 {
        let mut j = points.len() - 1;
        while j > i + 1 && !collision_free(&points[i], &points[j], obstacles) {
            j -= 1;
        }
        out.push(points[j]);
        i = j;
    }
    out
}

/// Plain goal-biased RRT followed by shortcut smoothing.
///
/// Obstacles are inflated by `cfg.clearance`. Sampling covers the bounding
/// box of start, goal and obstacles padded by one step. The returned path is
/// certified: every segment misses every inflated obstacle.
pub fn rrt_plan(start: &Vec3, goal: &Vec3, obstacles: &[Aabb3], cfg: &PlanConfig) -> Result<Path3> {
    cfg.validate()?;
    let inflated: Vec<Aabb3> = obstacles.iter().map(|b| b.inflated(cfg.clearance)).collect();
    if inflated.iter().any(|b| b.contains(start)) {
        return Err(PlanError::StartInCollision);
    }
    if inflated.iter().any(|b| b.contains(goal)) {
        return Err(PlanError::GoalInCollision);
    }
    if start == goal {
        return Ok(Path3::from_points(&[*start]));
    }

    let mut bounds = Aabb3::new(*start, *start).union(&Aabb3::new(*goal, *goal));
    for b in &inflated {
        bounds = bounds.union(b);
    }
    let bounds = bounds.inflated(cfg.step);

    let mut rng = SplitMix64::new(cfg.seed);
    let mut nodes: Vec<Vec3> = vec![*start];
    let mut parent: Vec<usize> = vec![0];
    let mut reached: Option<usize> = None;

    if collision_free(start, goal, &inflated) {
        nodes.push(*goal);
        parent.push(0);
        reached = Some(1);
    }

    let mut iter = 0;
    while reached.is_none() && iter < cfg.max_iters {
        iter += 1;
        let sample = if rng.next_f64() < cfg.goal_bias {
            *goal
        } else {
            Vec3::new(
                rng.uniform(bounds.min[0], bounds.max[0]),
                rng.uniform(bounds.min[1], bounds.max[1]),
                rng.uniform(bounds.min[2], bounds.max[2]),
            )
        };
        let (near, dist) = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, (n - sample).norm_squared()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        let dist = dist.sqrt();
        if dist == 0.0 {
            continue;
        }
        let new = if dist <= cfg.step { sample } else { nodes[near] + (sample - nodes[near]) * (cfg.step / dist) };
        if !collision_free(&nodes[near], &new, &inflated) {
            continue;
        }
        nodes.push(new);
        parent.push(near);
        let idx = nodes.len() - 1;
        if new == *goal {
            reached = Some(idx);
        } else if (new - goal).norm() <= cfg.step && collision_free(&new, goal, &inflated) {
            nodes.push(*goal);
            parent.push(idx);
            reached = Some(idx + 1);
        }
    }

    let end = reached.ok_or(PlanError::Infeasible(cfg.max_iters))?;
    let mut chain = vec![nodes[end]];
    let mut cur = end;
    while cur != 0 {
        cur = parent[cur];
        chain.push(nodes[cur]);
    }
    chain.reverse();
    chain.dedup();
    Ok(Path3::from_points(&shortcut(&chain, &inflated)))
}

/// Ids of boxes crossed by the straight segment, ordered by entry point.
pub fn obstructions(p0: &Vec3, p1: &Vec3, objects: &BTreeMap<String, Aabb3>) -> Vec<String> {
    let mut hits: Vec<(f64, &String)> =
        objects.iter().filter_map(|(id, b)| segment_entry(p0, p1, b).map(|t| (t, id))).collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    hits.into_iter().map(|(_, id)| id.clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
    Forward,
    Backward,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }

    fn of(delta: &Vec3) -> (Direction, f64) {
        let k = (0..3).fold(0, |best, k| if delta[k].abs() > delta[best].abs() { k } else { best });
        let v = delta[k];
        let dir = match (k, v > 0.0) {
            (0, true) => Direction::Right,
            (0, false) => Direction::Left,
            (1, true) => Direction::Down,
            (1, false) => Direction::Up,
            (_, true) => Direction::Backward,
            (_, false) => Direction::Forward,
        };
        (dir, v.abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub direction: Direction,
    /// Centimeters, rounded to 0.1.
    pub distance_cm: f64,
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "move {} {:.1} cm", self.direction.as_str(), self.distance_cm)
    }
}

/// Dominant-axis verbalisation of a path.
///
/// Each segment contributes its largest-magnitude axis component; runs of
/// segments with the same direction are merged before rounding.
pub fn path_to_instructions(path: &Path3) -> Result<Vec<Instruction>> {
    let pts = path.points();
    if pts.len() < 2 {
        return Err(PlanError::TooFewWaypoints(2));
    }
    let mut merged: Vec<(Direction, f64)> = Vec::new();
    for (i, w) in pts.windows(2).enumerate() {
        let delta = w[1] - w[0];
        if delta.norm() == 0.0 {
            return Err(PlanError::ZeroLengthSegment(i));
        }
        let (dir, meters) = Direction::of(&delta);
        match merged.last_mut() {
            Some((d, m)) if *d == dir => *m += meters,
            _ => merged.push((dir, meters)),
        }
    }
    Ok(merged
        .into_iter()
        .map(|(direction, m)| Instruction { direction, distance_cm: (m * 1000.0).round() / 10.0 })
        .collect())
}

pub fn instructions_text(steps: &[Instruction]) -> String {
    steps.iter().map(Instruction::to_string).collect::<Vec<_>>().join(", then ")
}

/// Perspective projection of every waypoint into a camera with the given
/// pose (expressed in the same frame as the path).
pub fn project_path(path: &Path3, intr: &CameraIntrinsics, pose: &CameraPose) -> Result<Vec<(f64, f64)>> {
    pose.validate()?;
    path.points().iter().map(|p| Ok(project(&pose.world_to_camera(p), intr)?)).collect()
}
