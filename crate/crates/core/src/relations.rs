//! Rule-based physical relation typing between objects, evaluated on
//! gravity-aligned boxes.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpatialRelation {
    #[serde(rename = "support")]
    Support,
    #[serde(rename = "stacking")]
    Stacking,
    #[serde(rename = "hanging")]
    Hanging,
    #[serde(rename = "adhesion")]
    Adhesion,
    #[serde(rename = "plug-in")]
    PlugIn,
    #[serde(rename = "adjacent")]
    Adjacent,
}

impl SpatialRelation {
    pub const ALL: [SpatialRelation; 6] = [
        SpatialRelation::Support,
        SpatialRelation::Stacking,
        SpatialRelation::Hanging,
        SpatialRelation::Adhesion,
        SpatialRelation::PlugIn,
        SpatialRelation::Adjacent,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SpatialRelation::Support => "support",
            SpatialRelation::Stacking => "stacking",
            SpatialRelation::Hanging => "hanging",
            SpatialRelation::Adhesion => "adhesion",
            SpatialRelation::PlugIn => "plug-in",
            SpatialRelation::Adjacent => "adjacent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationConfig {
    /// Largest face gap still counted as contact, meters.
    pub contact_gap: f64,
    /// Footprint overlap (fraction of the smaller footprint) needed for support.
    pub footprint_overlap: f64,
    /// Fraction of the inner box's volume inside the outer one for plug-in.
    pub containment: f64,
}

impl Default for RelationConfig {
    fn default() -> Self {
        RelationConfig { contact_gap: 0.02, footprint_overlap: 0.3, containment: 0.6 }
    }
}

/// Horizontal axes plus up. The first horizontal axis is the reference
/// camera's x axis with its vertical component removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityFrame {
    pub e1: Vec3,
    pub e2: Vec3,
    pub up: Vec3,
}

impl GravityFrame {
    pub fn new(up: &Vec3) -> Self {
        let up = up.normalize();
        let mut e1 = Vec3::x() - up * up.x;
        if e1.norm() < 1e-6 {
            e1 = Vec3::z() - up * up.z;
        }
        let e1 = e1.normalize();
        let e2 = up.cross(&e1);
        GravityFrame { e1, e2, up }
    }

    /// Rotation from the canonical frame into the levelled frame: the
    /// reference camera frame with pitch and roll removed (x right, y down
    /// along gravity, z forward).
    pub fn level_rotation(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[self.e1.transpose(), -self.up.transpose(), self.e2.transpose()])
    }

    pub fn to_level(&self, p: &Vec3) -> Vec3 {
        Vec3::new(p.dot(&self.e1), -p.dot(&self.up), p.dot(&self.e2))
    }

    /// `(u, w, h)` coordinates of a canonical point.
    pub fn coords(&self, p: &Vec3) -> [f64; 3] {
        [p.dot(&self.e1), p.dot(&self.e2), p.dot(&self.up)]
    }
}

/// Axis-aligned box in gravity coordinates `(u, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl GravityBox {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Self {
        GravityBox { lo, hi }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>, frame: &GravityFrame) -> Option<Self> {
        let mut it = points.into_iter();
        let first = frame.coords(it.next()?);
        let mut b = GravityBox { lo: first, hi: first };
        for p in it {
            let c = frame.coords(p);
            for k in 0..3 {
                b.lo[k] = b.lo[k].min(c[k]);
                b.hi[k] = b.hi[k].max(c[k]);
            }
        }
        Some(b)
    }

    pub fn footprint_area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    pub fn volume(&self) -> f64 {
        self.footprint_area() * (self.hi[2] - self.lo[2])
    }
}

fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn gap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a0 - b1).max(b0 - a1).max(0.0)
}

/// Footprint intersection as a fraction of the smaller footprint.
pub fn footprint_overlap(a: &GravityBox, b: &GravityBox) -> f64 {
    let inter = overlap_1d(a.lo[0], a.hi[0], b.lo[0], b.hi[0]) * overlap_1d(a.lo[1], a.hi[1], b.lo[1], b.hi[1]);
    let smaller = a.footprint_area().min(b.footprint_area());
    if smaller <= 0.0 { 0.0 } else { inter / smaller }
}

/// Horizontal distance between footprints (0 when they overlap).
pub fn footprint_gap(a: &GravityBox, b: &GravityBox) -> f64 {
    gap_1d(a.lo[0], a.hi[0], b.lo[0], b.hi[0]).hypot(gap_1d(a.lo[1], a.hi[1], b.lo[1], b.hi[1]))
}

/// Fraction of `inner`'s volume that lies inside `outer`.
pub fn contained_fraction(inner: &GravityBox, outer: &GravityBox) -> f64 {
    let v = inner.volume();
    if v <= 0.0 {
        return 0.0;
    }
    let inter: f64 = (0..3).map(|k| overlap_1d(inner.lo[k], inner.hi[k], outer.lo[k], outer.hi[k])).product();
    inter / v
}

/// `top` rests on `bottom`: bottom face of `top` within the contact gap of
/// the top face of `bottom`, with enough footprint overlap.
pub fn rests_on(top: &GravityBox, bottom: &GravityBox, cfg: &RelationConfig) -> bool {
    (top.lo[2] - bottom.hi[2]).abs() < cfg.contact_gap && footprint_overlap(top, bottom) >= cfg.footprint_overlap
}

/// `a` is suspended under `b`: top face of `a` touches the bottom face of `b`.
pub fn hangs_under(a: &GravityBox, b: &GravityBox, cfg: &RelationConfig) -> bool {
    (b.lo[2] - a.hi[2]).abs() < cfg.contact_gap && footprint_overlap(a, b) >= cfg.footprint_overlap
}

/// Side-by-side contact on a vertical face.
pub fn side_contact(a: &GravityBox, b: &GravityBox, cfg: &RelationConfig) -> bool {
    overlap_1d(a.lo[2], a.hi[2], b.lo[2], b.hi[2]) > 0.0
        && footprint_gap(a, b) < cfg.contact_gap
        && footprint_overlap(a, b) < cfg.footprint_overlap
}

/// Objects of one scene in gravity coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationScene {
    pub boxes: Vec<GravityBox>,
    /// Structural elements (walls, ceiling) can be relation targets but never
    /// extend a support chain.
    pub structural: Vec<bool>,
    /// Height of the floor surface, if known.
    pub floor_height: Option<f64>,
}

impl RelationScene {
    /// Whether object `a` is held up from below by the floor or another
    /// non-structural object.
    pub fn grounded(&self, a: usize, cfg: &RelationConfig) -> bool {
        let ba = &self.boxes[a];
        if self.floor_height.is_some_and(|f| (ba.lo[2] - f).abs() < cfg.contact_gap) {
            return true;
        }
        (0..self.boxes.len()).any(|c| c != a && !self.structural[c] && rests_on(ba, &self.boxes[c], cfg))
    }

    /// Relation of `a` with respect to `b`. Rules are tried in the order
    /// plug-in, stacking, support, hanging, adhesion; anything else is
    /// adjacent.
    pub fn classify(&self, a: usize, b: usize, cfg: &RelationConfig) -> SpatialRelation {
        let (ba, bb) = (&self.boxes[a], &self.boxes[b]);
        if contained_fraction(ba, bb) >= cfg.containment {
            return SpatialRelation::PlugIn;
        }
        if rests_on(ba, bb, cfg) {
            let others = (0..self.boxes.len()).filter(|&c| c != a && c != b && !self.structural[c]);
            let chained = others.clone().any(|c| rests_on(bb, &self.boxes[c], cfg) && !self.structural[b])
                || others.clone().any(|c| rests_on(&self.boxes[c], ba, cfg));
            return if chained { SpatialRelation::Stacking } else { SpatialRelation::Support };
        }
        let grounded = self.grounded(a, cfg);
        if hangs_under(ba, bb, cfg) && !grounded {
            return SpatialRelation::Hanging;
        }
        if side_contact(ba, bb, cfg) && !grounded {
            return SpatialRelation::Adhesion;
        }
        SpatialRelation::Adjacent
    }
}
