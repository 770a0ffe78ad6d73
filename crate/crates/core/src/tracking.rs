//! Detection association into tracks and the counting rules built on top.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("invalid box {0:?}")]
    InvalidBox(BBox),
    #[error("frames are not sorted (frame {0} after {1})")]
    UnsortedFrames(usize, usize),
    #[error("class {0:?} has no confirmed track")]
    ClassAbsent(String),
    #[error("no track overlaps the anchor box at frame {0}")]
    NoAnchorTrack(usize),
    #[error("invalid association config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, TrackingError>;

/// Axis-aligned pixel box `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(TrackingError::InvalidBox(*self));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn min_side(&self) -> f64 {
        self.width().min(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn shifted_to(&self, center: (f64, f64)) -> BBox {
        let (cx, cy) = self.center();
        let (dx, dy) = (center.0 - cx, center.1 - cy);
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    fn key(&self) -> [u64; 4] {
        [self.x1.to_bits(), self.y1.to_bits(), self.x2.to_bits(), self.y2.to_bits()]
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    iou(a, b).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: usize,
    pub class_name: String,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: usize,
    pub class_name: String,
    pub observations: BTreeMap<usize, BBox>,
    pub confirmed: bool,
}

impl Track {
    pub fn first_frame(&self) -> usize {
        *self.observations.keys().next().expect("tracks are never empty")
    }

    pub fn last_frame(&self) -> usize {
        *self.observations.keys().next_back().expect("tracks are never empty")
    }

    /// Longest run of observations on consecutive frames.
    pub fn longest_run(&self) -> usize {
        let mut best = 0;
        let mut run = 0;
        let mut prev: Option<usize> = None;
        for &f in self.observations.keys() {
            run = if prev == Some(f.wrapping_sub(1)) { run + 1 } else { 1 };
            best = best.max(run);
            prev = Some(f);
        }
        best
    }

    /// Constant-velocity prediction of the box at `frame` from the last two
    /// observations (zero velocity with a single observation).
    pub fn predict(&self, frame: usize) -> BBox {
        let mut it = self.observations.iter().rev();
        let (&f1, b1) = it.next().expect("tracks are never empty");
        match it.next() {
            None => *b1,
            Some((&f0, b0)) => {
                let (c0, c1) = (b0.center(), b1.center());
                let dt = (f1 - f0) as f64;
                let (vx, vy) = ((c1.0 - c0.0) / dt, (c1.1 - c0.1) / dt);
                let ahead = frame as f64 - f1 as f64;
                b1.shifted_to((c1.0 + vx * ahead, c1.1 + vy * ahead))
            }
        }
    }
}

/// Thresholds for association and counting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    pub score_min: f64,
    pub iou_min: f64,
    pub center_dist_max: f64,
    pub confirm_count: usize,
    pub scene_min_objects: usize,
    pub scene_max_objects: usize,
    pub bbox_min_side: f64,
    /// Frames without a match before a track stops being extended.
    pub max_missed: usize,
    /// Require `confirm_count` matches on consecutive frames instead of in total.
    pub consecutive: bool,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            score_min: 0.3,
            iou_min: 0.4,
            center_dist_max: 32.0,
            confirm_count: 10,
            scene_min_objects: 2,
            scene_max_objects: 10,
            bbox_min_side: 32.0,
            max_missed: 5,
            consecutive: false,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.score_min > 0.0
            && self.iou_min > 0.0
            && self.center_dist_max > 0.0
            && self.confirm_count > 0
            && self.scene_min_objects > 0
            && self.bbox_min_side > 0.0
            && self.max_missed > 0;
        if !positive {
            return Err(TrackingError::InvalidConfig("thresholds must be positive".into()));
        }
        if self.scene_min_objects > self.scene_max_objects {
            return Err(TrackingError::InvalidConfig("scene_min_objects > scene_max_objects".into()));
        }
        Ok(())
    }

    fn is_confirmed(&self, track: &Track) -> bool {
        if self.consecutive {
            track.longest_run() >= self.confirm_count
        } else {
            track.observations.len() >= self.confirm_count
        }
    }
}

fn canonical_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    a.class_name
        .cmp(&b.class_name)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
        .then(a.score.total_cmp(&b.score))
}

fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.center(), b.center());
    (ca.0 - cb.0).hypot(ca.1 - cb.1)
}

/// Greedy frame-by-frame association.
///
/// Detections below `score_min` are dropped. Within a frame, detections are
/// put in a canonical order, every (track, detection) pair of the same class
/// is scored against the track's constant-velocity prediction, and pairs are
/// accepted greedily by descending IoU (then ascending center distance,
/// track id, detection index) when IoU >= `iou_min` or center distance <=
/// `center_dist_max`. Unmatched detections open new tracks.
pub fn associate(detections: &[Detection], cfg: &AssociationConfig) -> Result<Vec<Track>> {
    cfg.validate()?;
    for pair in detections.windows(2) {
        if pair[1].frame < pair[0].frame {
            return Err(TrackingError::UnsortedFrames(pair[1].frame, pair[0].frame));
        }
    }
    for d in detections {
        d.bbox.validate()?;
    }

    let mut tracks: Vec<Track> = Vec::new();
    let mut start = 0;
    while start < detections.len() {
        let frame = detections[start].frame;
        let end = start + detections[start..].iter().take_while(|d| d.frame == frame).count();
        let mut frame_dets: Vec<&Detection> =
            detections[start..end].iter().filter(|d| d.score >= cfg.score_min).collect();
        frame_dets.sort_by(|a, b| canonical_order(a, b));
        // Exact duplicates collapse to one detection.
        frame_dets.dedup_by(|a, b| a.class_name == b.class_name && a.bbox.key() == b.bbox.key());
        start = end;

        let live: Vec<usize> =
            (0..tracks.len()).filter(|&i| frame.saturating_sub(tracks[i].last_frame()) <= cfg.max_missed).collect();

        let mut pairs: Vec<(f64, f64, usize, usize)> = Vec::new();
        for &ti in &live {
            let predicted = tracks[ti].predict(frame);
            for (di, det) in frame_dets.iter().enumerate() {
                if det.class_name != tracks[ti].class_name {
                    continue;
                }
                let overlap = iou_unchecked(&predicted, &det.bbox);
                let dist = center_distance(&predicted, &det.bbox);
                if overlap >= cfg.iou_min || dist <= cfg.center_dist_max {
                    pairs.push((overlap, dist, ti, di));
                }
            }
        }
        pairs.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)).then(tracks[a.2].id.cmp(&tracks[b.2].id)).then(a.3.cmp(&b.3))
        });

        let mut det_taken = vec![false; frame_dets.len()];
        let mut track_taken: HashMap<usize, bool> = HashMap::new();
        for (_, _, ti, di) in pairs {
            if det_taken[di] || track_taken.contains_key(&ti) {
                continue;
            }
            det_taken[di] = true;
            track_taken.insert(ti, true);
            tracks[ti].observations.insert(frame, frame_dets[di].bbox);
        }
        for (di, det) in frame_dets.iter().enumerate() {
            if !det_taken[di] {
                let id = tracks.len();
                tracks.push(Track {
                    id,
                    class_name: det.class_name.clone(),
                    observations: BTreeMap::from([(frame, det.bbox)]),
                    confirmed: false,
                });
            }
        }
    }
    for t in &mut tracks {
        t.confirmed = cfg.is_confirmed(t);
    }
    Ok(tracks)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CountOutcome {
    Counts(BTreeMap<String, usize>),
    /// Total confirmed objects outside the accepted scene range.
    SceneRejected { total: usize },
}

fn median_min_side(track: &Track) -> f64 {
    let mut sides: Vec<f64> = track.observations.values().map(BBox::min_side).collect();
    sides.sort_by(f64::total_cmp);
    sides[(sides.len() - 1) / 2]
}

/// Count confirmed tracks per class, applying the box-size filter and the
/// scene-level object range.
pub fn count_confirmed(tracks: &[Track], cfg: &AssociationConfig) -> CountOutcome {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in tracks {
        if t.confirmed && median_min_side(t) >= cfg.bbox_min_side {
            *counts.entry(t.class_name.clone()).or_default() += 1;
        }
    }
    let total: usize = counts.values().sum();
    if total < cfg.scene_min_objects || total > cfg.scene_max_objects {
        return CountOutcome::SceneRejected { total };
    }
    CountOutcome::Counts(counts)
}

/// Classes ordered by the first frame of their earliest confirmed track.
pub fn appearance_order(tracks: &[Track], classes: &[String]) -> Result<Vec<String>> {
    let mut keyed = Vec::with_capacity(classes.len());
    for class in classes {
        let first = tracks
            .iter()
            .filter(|t| t.confirmed && &t.class_name == class)
            .map(|t| (t.first_frame(), t.id))
            .min()
            .ok_or_else(|| TrackingError::ClassAbsent(class.clone()))?;
        keyed.push((first, class.clone()));
    }
    keyed.sort();
    Ok(keyed.into_iter().map(|(_, c)| c).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceMatch {
    Same,
    Different,
}

/// Best-overlapping track at `frame` with IoU >= `min_iou`.
pub fn track_at(tracks: &[Track], frame: usize, bbox: &BBox, min_iou: f64) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for t in tracks {
        if let Some(obs) = t.observations.get(&frame) {
            let v = iou_unchecked(obs, bbox);
            if v >= min_iou && best.is_none_or(|(bv, bid)| v > bv || (v == bv && t.id < bid)) {
                best = Some((v, t.id));
            }
        }
    }
    best.map(|(_, id)| id)
}

/// Whether a box in a later frame shows the same physical instance as a box
/// in an earlier frame, judged through track identity at IoU >= 0.5.
pub fn match_instance(
    first: (&BBox, usize),
    candidate: (&BBox, usize),
    tracks: &[Track],
) -> Result<InstanceMatch> {
    let (first_box, first_frame) = first;
    let (cand_box, cand_frame) = candidate;
    first_box.validate()?;
    cand_box.validate()?;
    let anchor = track_at(tracks, first_frame, first_box, 0.5).ok_or(TrackingError::NoAnchorTrack(first_frame))?;
    Ok(match track_at(tracks, cand_frame, cand_box, 0.5) {
        Some(id) if id == anchor => InstanceMatch::Same,
        _ => InstanceMatch::Different,
    })
}
