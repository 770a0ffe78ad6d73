//! QA record construction: task dispatch, templates, distractors, referring
//! inputs, anchors and scale buckets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::answer::{format_quantity, Answer, AnswerMode, Target, Unit};
use crate::depth;
use crate::geometry::{self, CameraPose, FrameTag, PointCloud, Vec3};
use crate::planner::{self, Aabb3, Path3, PlanConfig, Relation};
use crate::relations::{GravityBox, GravityFrame, RelationConfig, RelationScene, SpatialRelation};
use crate::rng::SplitMix64;
use crate::scene::{self, Instance, SceneAnnotations, SceneStats};
use crate::tracking::{self, BBox, CountOutcome, InstanceMatch};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QaError {
    #[error("template slot {0:?} has no value")]
    UnknownSlot(String),
    #[error("no templates for task {0}")]
    NoTemplates(Task),
    #[error("label universe too small for distractors")]
    UniverseTooSmall,
    #[error("scene scale out of range (p95 depth {p95_depth} m, max object extent {max_object_extent} m)")]
    OutOfRange { p95_depth: f64, max_object_extent: f64 },
    #[error("scene statistics must be finite and positive")]
    InvalidStats,
    #[error("instance {instance} has no mask in frame {frame}")]
    NoMask { instance: u16, frame: usize },
    #[error("record cannot take a referring input: {0}")]
    NotReferable(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
}

pub type Result<T> = std::result::Result<T, QaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PositionComparison,
    SizeComparison,
    ExistenceEstimation,
    RotationEstimation,
    RelativeDistance,
    AbsoluteDistance,
    ObjectCounting,
    ObjectSize,
    RoutePlan,
    AppearanceOrder,
    DepthEstimation,
    ViewChangeInference,
    ObjectMatching,
    SpatialRelation,
    RoomSize,
    Navigation,
    AreaEstimation,
    ObstaclesLocation,
    ManipulationPlanning,
}

impl Task {
    pub const ALL: [Task; 19] = [
        Task::PositionComparison,
        Task::SizeComparison,
        Task::ExistenceEstimation,
        Task::RotationEstimation,
        Task::RelativeDistance,
        Task::AbsoluteDistance,
        Task::ObjectCounting,
        Task::ObjectSize,
        Task::RoutePlan,
        Task::AppearanceOrder,
        Task::DepthEstimation,
        Task::ViewChangeInference,
        Task::ObjectMatching,
        Task::SpatialRelation,
        Task::RoomSize,
        Task::Navigation,
        Task::AreaEstimation,
        Task::ObstaclesLocation,
        Task::ManipulationPlanning,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::PositionComparison => "position_comparison",
            Task::SizeComparison => "size_comparison",
            Task::ExistenceEstimation => "existence_estimation",
            Task::RotationEstimation => "rotation_estimation",
            Task::RelativeDistance => "relative_distance",
            Task::AbsoluteDistance => "absolute_distance",
            Task::ObjectCounting => "object_counting",
            Task::ObjectSize => "object_size",
            Task::RoutePlan => "route_plan",
            Task::AppearanceOrder => "appearance_order",
            Task::DepthEstimation => "depth_estimation",
            Task::ViewChangeInference => "view_change_inference",
            Task::ObjectMatching => "object_matching",
            Task::SpatialRelation => "spatial_relation",
            Task::RoomSize => "room_size",
            Task::Navigation => "navigation",
            Task::AreaEstimation => "area_estimation",
            Task::ObstaclesLocation => "obstacles_location",
            Task::ManipulationPlanning => "manipulation_planning",
        }
    }

    /// Slot names every template of this task may use.
    pub fn slots(&self) -> &'static [&'static str] {
        match self {
            Task::PositionComparison
            | Task::SizeComparison
            | Task::AbsoluteDistance
            | Task::SpatialRelation
            | Task::ObstaclesLocation => &["a", "b"],
            Task::ExistenceEstimation | Task::ObjectCounting | Task::AreaEstimation => &["a"],
            Task::RotationEstimation => &["a", "t0", "t1"],
            Task::RelativeDistance => &["a", "choices"],
            Task::ObjectSize => &["a", "dimension"],
            Task::RoutePlan | Task::Navigation => &["a", "relation"],
            Task::AppearanceOrder => &["choices"],
            Task::DepthEstimation => &["a", "t"],
            Task::ViewChangeInference => &["t"],
            Task::ObjectMatching => &["box0", "t0", "box1", "t1"],
            Task::RoomSize => &[],
            Task::ManipulationPlanning => &["a", "b", "relation"],
        }
    }

    /// Unit of the ground truth for numeric tasks; `None` for categorical ones.
    pub fn unit(&self) -> Option<Unit> {
        match self {
            Task::RotationEstimation => Some(Unit::Degrees),
            Task::AbsoluteDistance | Task::ObjectSize | Task::DepthEstimation => Some(Unit::Meters),
            Task::ObjectCounting => Some(Unit::Count),
            Task::RoomSize | Task::AreaEstimation => Some(Unit::SquareMeters),
            _ => None,
        }
    }

    /// Whether slot `a` names one specific instance (and so can be replaced
    /// by a point, box or mask).
    pub fn refers_instance(&self) -> bool {
        self.slots().contains(&"a") && !matches!(self, Task::ExistenceEstimation | Task::ObjectCounting)
    }

    pub fn supports(&self, mode: AnswerMode) -> bool {
        self.unit().is_some() || mode != AnswerMode::Regression
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = QaError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.as_str() == s.trim()).ok_or_else(|| QaError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleBucket {
    TinyTabletop,
    Tabletop,
    Indoor,
    WildIndoor,
    Outdoor,
    Drone,
}

impl ScaleBucket {
    pub const ALL: [ScaleBucket; 6] = [
        ScaleBucket::TinyTabletop,
        ScaleBucket::Tabletop,
        ScaleBucket::Indoor,
        ScaleBucket::WildIndoor,
        ScaleBucket::Outdoor,
        ScaleBucket::Drone,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScaleBucket::TinyTabletop => "tiny_tabletop",
            ScaleBucket::Tabletop => "tabletop",
            ScaleBucket::Indoor => "indoor",
            ScaleBucket::WildIndoor => "wild_indoor",
            ScaleBucket::Outdoor => "outdoor",
            ScaleBucket::Drone => "drone",
        }
    }
}

impl fmt::Display for ScaleBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inputs to bucketing. `wild` marks in-the-wild indoor footage as opposed
/// to scanned rooms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketInput {
    pub p95_depth: f64,
    pub max_object_extent: f64,
    pub camera_height: Option<f64>,
    pub indoor: bool,
    pub wild: bool,
}

impl BucketInput {
    pub fn from_stats(stats: &SceneStats, indoor: bool, source: &str) -> Self {
        BucketInput {
            p95_depth: stats.p95_depth,
            max_object_extent: stats.max_object_extent,
            camera_height: stats.camera_height,
            indoor,
            wild: source == "wild",
        }
    }
}

pub const MAX_SCENE_DEPTH: f64 = 700.0;
pub const MIN_OBJECT_EXTENT: f64 = 0.001;

pub fn scale_bucket(s: &BucketInput) -> Result<ScaleBucket> {
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if !positive(s.p95_depth) || !positive(s.max_object_extent) || s.camera_height.is_some_and(|h| !h.is_finite()) {
        return Err(QaError::InvalidStats);
    }
    if s.p95_depth > MAX_SCENE_DEPTH || s.max_object_extent < MIN_OBJECT_EXTENT {
        return Err(QaError::OutOfRange { p95_depth: s.p95_depth, max_object_extent: s.max_object_extent });
    }
    Ok(if s.camera_height.is_some_and(|h| h > 10.0) {
        ScaleBucket::Drone
    } else if s.max_object_extent < 0.05 {
        ScaleBucket::TinyTabletop
    } else if s.max_object_extent < 2.0 && s.p95_depth < 3.0 {
        ScaleBucket::Tabletop
    } else if s.indoor {
        if s.wild { ScaleBucket::WildIndoor } else { ScaleBucket::Indoor }
    } else if s.p95_depth < 500.0 {
        ScaleBucket::Outdoor
    } else {
        ScaleBucket::Drone
    })
}

// ---------------------------------------------------------------------------
// Templates

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z0-9_]+)\}").expect("static regex"));

/// Question templates per task.
#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct TemplateSet {
    by_task: BTreeMap<Task, Vec<String>>,
}

macro_rules! builtin_templates {
    ($($task:ident => $file:literal),* $(,)?) => {
        [$((Task::$task, include_str!(concat!("../templates/v1/", $file)))),*]
    };
}

static BUILTIN: LazyLock<TemplateSet> = LazyLock::new(|| {
    let files = builtin_templates![
        PositionComparison => "position_comparison.txt",
        SizeComparison => "size_comparison.txt",
        ExistenceEstimation => "existence_estimation.txt",
        RotationEstimation => "rotation_estimation.txt",
        RelativeDistance => "relative_distance.txt",
        AbsoluteDistance => "absolute_distance.txt",
        ObjectCounting => "object_counting.txt",
        ObjectSize => "object_size.txt",
        RoutePlan => "route_plan.txt",
        AppearanceOrder => "appearance_order.txt",
        DepthEstimation => "depth_estimation.txt",
        ViewChangeInference => "view_change_inference.txt",
        ObjectMatching => "object_matching.txt",
        SpatialRelation => "spatial_relation.txt",
        RoomSize => "room_size.txt",
        Navigation => "navigation.txt",
        AreaEstimation => "area_estimation.txt",
        ObstaclesLocation => "obstacles_location.txt",
        ManipulationPlanning => "manipulation_planning.txt",
    ];
    let mut set = TemplateSet::default();
    for (task, text) in files {
        set.insert(task, parse_template_lines(text));
    }
    set
});


/// One template per non-empty line; lines starting with `#` are comments.
pub fn parse_template_lines(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect()
}

/// Slot names used by a template, in order of appearance.
pub fn template_slots(template: &str) -> Vec<&str> {
    SLOT.captures_iter(template).map(|c| c.get(1).expect("group").as_str()).collect()
}

/// Substitute every `{slot}`; a slot without a value is an error.
pub fn fill_template(template: &str, slots: &BTreeMap<String, String>) -> Result<String> {
    if let Some(missing) = template_slots(template).into_iter().find(|s| !slots.contains_key(*s)) {
        return Err(QaError::UnknownSlot(missing.to_string()));
    }
    Ok(SLOT.replace_all(template, |c: &regex::Captures<'_>| slots[&c[1]].clone()).into_owned())
}

impl TemplateSet {
    /// The versioned starter set shipped with the crate.
    pub fn builtin() -> &'static TemplateSet {
        &BUILTIN
    }

    pub fn insert(&mut self, task: Task, templates: Vec<String>) {
        self.by_task.insert(task, templates);
    }

    pub fn get(&self, task: Task) -> &[String] {
        self.by_task.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.by_task.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every slot used by a template must be one the task provides.
    pub fn validate(&self) -> Result<()> {
        for (task, list) in &self.by_task {
            if list.is_empty() {
                return Err(QaError::NoTemplates(*task));
            }
            for t in list {
                if let Some(bad) = template_slots(t).into_iter().find(|s| !task.slots().contains(s)) {
                    return Err(QaError::UnknownSlot(bad.to_string()));
                }
            }
        }
        Ok(())
    }
}

/// Pick a template uniformly and fill it. Returns the template index and text.
pub fn render_template(
    set: &TemplateSet,
    task: Task,
    slots: &BTreeMap<String, String>,
    rng: &mut SplitMix64,
) -> Result<(usize, String)> {
    let list = set.get(task);
    if list.is_empty() {
        return Err(QaError::NoTemplates(task));
    }
    let index = rng.below(list.len() as u64) as usize;
    Ok((index, fill_template(&list[index], slots)?))
}

// ---------------------------------------------------------------------------
// Distractors

/// Typed ground truth of one item.
#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Quantity { value: f64, unit: Unit },
    /// A label together with every label the task could have produced for
    /// this item (including the answer).
    Label { label: String, universe: Vec<String> },
}

impl Truth {
    pub fn display(&self) -> String {
        match self {
            Truth::Quantity { value, unit } => format_quantity(*value, *unit),
            Truth::Label { label, .. } => label.clone(),
        }
    }
}

const MAX_DRAWS: usize = 10_000;

/// Three numeric distractors drawn log-uniformly from `[gt/3, 3 gt]` outside
/// `(0.9 gt, 1.1 gt)`, distinct from each other and from the answer once
/// formatted.
pub fn numeric_distractors(gt: f64, unit: Unit, rng: &mut SplitMix64) -> Result<Vec<String>> {
    if !(gt.is_finite() && gt > 0.0) {
        return Err(QaError::UniverseTooSmall);
    }
    let answer = format_quantity(gt, unit);
    let (lo, hi) = ((gt / 3.0).ln(), (gt * 3.0).ln());
    let mut out: Vec<String> = Vec::with_capacity(3);
    for _ in 0..MAX_DRAWS {
        let v = rng.uniform(lo, hi).exp();
        if v > 0.9 * gt && v < 1.1 * gt {
            continue;
        }
        let s = format_quantity(v, unit);
        if s != answer && !out.contains(&s) {
            out.push(s);
            if out.len() == 3 {
                return Ok(out);
            }
        }
    }
    Err(QaError::UniverseTooSmall)
}

/// Up to three labels from the universe minus the answer.
pub fn categorical_distractors(label: &str, universe: &[String], rng: &mut SplitMix64) -> Result<Vec<String>> {
    let mut pool: Vec<String> = Vec::new();
    for u in universe {
        if u != label && !pool.contains(u) {
            pool.push(u.clone());
        }
    }
    if pool.is_empty() {
        return Err(QaError::UniverseTooSmall);
    }
    rng.shuffle(&mut pool);
    pool.truncate(3);
    Ok(pool)
}

pub fn gen_distractors(truth: &Truth, rng: &mut SplitMix64) -> Result<Vec<String>> {
    match truth {
        Truth::Quantity { value, unit } => numeric_distractors(*value, *unit, rng),
        Truth::Label { label, universe } => categorical_distractors(label, universe, rng),
    }
}

/// Shuffle the answer in among the distractors; returns options and the
/// letter of the correct one.
pub fn arrange_options(answer: &str, distractors: Vec<String>, rng: &mut SplitMix64) -> (Vec<String>, char) {
    let mut options = distractors;
    options.push(answer.to_string());
    rng.shuffle(&mut options);
    let k = options.iter().position(|o| o == answer).expect("answer is among the options");
    (options, (b'A' + k as u8) as char)
}

// ---------------------------------------------------------------------------
// Records

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Anchors {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferringKind {
    Point,
    Bbox,
    Mask,
}

impl FromStr for ReferringKind {
    type Err = QaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "point" => Ok(ReferringKind::Point),
            "bbox" => Ok(ReferringKind::Bbox),
            "mask" => Ok(ReferringKind::Mask),
            other => Err(QaError::NotReferable(format!("unknown referring mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Referring {
    #[default]
    None,
    Point {
        u: u32,
        v: u32,
    },
    Bbox {
        bbox: [f64; 4],
    },
    Mask {
        mask_id: u16,
    },
}

/// Everything needed to recompute an answer from the raw scene. Planning
/// coordinates (`start`, `goal`, `path`) are in the levelled reference frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Refs {
    pub template: usize,
    pub slots: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instances: Vec<u16>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<Path3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanConfig>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub scene_id: String,
    pub task: Task,
    pub question: String,
    pub answer_mode: AnswerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_letter: Option<char>,
    /// Numeric ground truth behind a multiple-choice answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_value: Option<Quantity>,
    pub anchors: Anchors,
    #[serde(default)]
    pub referring: Referring,
    pub scale_bucket: ScaleBucket,
    #[serde(default)]
    pub refs: Refs,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl QaRecord {
    /// What a prediction for this record is scored against.
    pub fn target(&self) -> Target {
        match (&self.answer_letter, &self.answer) {
            (Some(c), _) => Target::Choice(*c),
            (None, Answer::Quantity { value, unit }) => Target::Quantity { value: *value, unit: *unit },
            (None, Answer::Text(t)) => Target::Text(t.clone()),
        }
    }

    /// Numeric ground truth, whatever the answer mode.
    pub fn quantity(&self) -> Option<Quantity> {
        match (&self.answer, &self.answer_value) {
            (Answer::Quantity { value, unit }, _) => Some(Quantity { value: *value, unit: *unit }),
            (_, Some(q)) => Some(q.clone()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(QaError::InvalidRecord { id: self.id.clone(), reason: reason.to_string() });
        if self.question.trim().is_empty() {
            return bad("empty question");
        }
        if self.anchors.scale.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return bad("scale anchor must be positive");
        }
        match self.answer_mode {
            AnswerMode::Mc => {
                let Some(options) = &self.options else { return bad("mc record without options") };
                if !(2..=6).contains(&options.len()) {
                    return bad("mc records need 2 to 6 options");
                }
                let Answer::Text(answer) = &self.answer else { return bad("mc answer must be an option") };
                let hits: Vec<usize> = options.iter().enumerate().filter(|(_, o)| *o == answer).map(|(k, _)| k).collect();
                if hits.len() != 1 {
                    return bad("exactly one option must equal the answer");
                }
                if self.answer_letter != Some((b'A' + hits[0] as u8) as char) {
                    return bad("answer letter does not point at the answer");
                }
            }
            AnswerMode::Regression => {
                if !matches!(self.answer, Answer::Quantity { .. }) {
                    return bad("regression answers carry a unit");
                }
                if self.options.is_some() {
                    return bad("regression records have no options");
                }
            }
            AnswerMode::Free => {
                if self.options.is_some() {
                    return bad("free records have no options");
                }
            }
        }
        if let Answer::Quantity { value, .. } = self.answer {
            if !value.is_finite() {
                return bad("non-finite answer");
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, PartialEq)]
pub struct QaConfig {
    pub tasks: Vec<Task>,
    pub modes: Vec<AnswerMode>,
    /// Items generated per task before the scene cap applies.
    pub per_task: usize,
    pub max_records: usize,
    pub seed: u64,
    pub referring: Option<ReferringKind>,
    pub relations: RelationConfig,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            tasks: Task::ALL.to_vec(),
            modes: vec![AnswerMode::Mc, AnswerMode::Regression, AnswerMode::Free],
            per_task: 3,
            max_records: 25,
            seed: 0,
            referring: None,
            relations: RelationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub task: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QaOutput {
    pub records: Vec<QaRecord>,
    pub skipped: Vec<Skip>,
}

/// Minimum lifted points for an object to be asked about by name.
pub const MIN_OBJECT_POINTS: usize = 20;
/// Pixels an instance needs in a frame to be asked about in that frame.
pub const MIN_MASK_PIXELS: usize = 20;
/// Classes used as absent candidates for existence questions.
pub const EXISTENCE_VOCAB: [&str; 24] = [
    "bed", "bicycle", "book", "bottle", "bowl", "cabinet", "car", "chair", "clock", "cup", "desk", "door",
    "keyboard", "lamp", "laptop", "microwave", "monitor", "plant", "pillow", "refrigerator", "sofa", "table",
    "television", "vase",
];
/// Words for the camera's dominant motion: +x, -x, -y, +y, +z, -z.
pub const VIEW_DIRECTIONS: [&str; 6] = ["right", "left", "up", "down", "forward", "backward"];
pub const SPATIAL_LABELS: [&str; 6] = ["support", "stacking", "hanging", "adhesion", "plug-in", "adjacent"];

/// One realised item before answer modes are applied.
struct Item {
    slots: BTreeMap<String, String>,
    truth: Truth,
    refs: Refs,
    semantic: Option<String>,
}

type Realised = std::result::Result<Item, String>;

#[derive(Debug, Clone, PartialEq)]
enum Candidate {
    One(u16),
    Pair(u16, u16),
    Choice(u16, [u16; 3]),
    Class(String),
    Classes([String; 3]),
    Frame(usize),
    InFrame(u16, usize),
    Keypoints(u16),
    Match(usize, Option<usize>),
    Scene,
}

/// Derived per-scene context shared by all tasks.
pub struct SceneContext<'a> {
    pub ann: &'a SceneAnnotations,
    pub bucket: ScaleBucket,
    pub gravity: GravityFrame,
    /// Non-structural objects whose class occurs once, ordered by id.
    pub named: Vec<&'a Instance>,
    /// AABBs of all non-structural objects in the levelled frame.
    pub boxes: BTreeMap<u16, Aabb3>,
}

impl<'a> SceneContext<'a> {
    pub fn new(ann: &'a SceneAnnotations) -> Result<Self> {
        let bucket = scale_bucket(&BucketInput::from_stats(&ann.stats, ann.indoor, &ann.source))?;
        let counts = ann.class_counts();
        let named = ann
            .objects()
            .filter(|i| counts.get(i.class_name.as_str()) == Some(&1) && i.cloud.len() >= MIN_OBJECT_POINTS)
            .collect();
        let gravity = GravityFrame::new(&ann.up);
        let boxes = ann.objects().filter_map(|i| level_box(&i.cloud, &gravity).map(|b| (i.id, b))).collect();
        Ok(SceneContext { ann, bucket, gravity, named, boxes })
    }

    fn inst(&self, id: u16) -> &'a Instance {
        &self.ann.instances[&id]
    }

    fn name(&self, id: u16) -> String {
        self.inst(id).class_name.clone()
    }

    fn tabletop(&self) -> bool {
        matches!(self.bucket, ScaleBucket::TinyTabletop | ScaleBucket::Tabletop)
    }

    /// Scene-level reason a task cannot run, if any.
    fn gate(&self, task: Task) -> Option<&'static str> {
        match task {
            Task::RoomSize if !self.ann.indoor => Some("room size needs an indoor scene"),
            Task::RoomSize if self.ann.floor_cloud().is_none() => Some("room size needs floor points"),
            Task::Navigation if self.ann.indoor => Some("navigation is asked in non-indoor scenes only"),
            Task::AreaEstimation if self.bucket != ScaleBucket::Drone => Some("area estimation is asked in drone scenes only"),
            Task::ObstaclesLocation | Task::ManipulationPlanning if !self.tabletop() => {
                Some("tabletop tasks need a tabletop-scale scene")
            }
            _ => None,
        }
    }

    fn candidates(&self, task: Task) -> std::result::Result<Vec<Candidate>, String> {
        let ids: Vec<u16> = self.named.iter().map(|i| i.id).collect();
        let ordered_pairs = || {
            let mut v = Vec::new();
            for &a in &ids {
                for &b in &ids {
                    if a != b {
                        v.push(Candidate::Pair(a, b));
                    }
                }
            }
            v
        };
        let unordered_pairs = || {
            let mut v = Vec::new();
            for (k, &a) in ids.iter().enumerate() {
                for &b in &ids[k + 1..] {
                    v.push(Candidate::Pair(a, b));
                }
            }
            v
        };
        Ok(match task {
            Task::PositionComparison | Task::SizeComparison | Task::ObstaclesLocation | Task::ManipulationPlanning => {
                ordered_pairs()
            }
            Task::AbsoluteDistance => unordered_pairs(),
            Task::SpatialRelation => {
                let mut v = ordered_pairs();
                for &a in &ids {
                    for w in self.ann.instances.values().filter(|i| matches!(i.class_name.as_str(), "wall" | "ceiling")) {
                        v.push(Candidate::Pair(a, w.id));
                    }
                }
                v
            }
            Task::ExistenceEstimation => {
                let present: BTreeSet<&str> = self.ann.objects().map(|i| i.class_name.as_str()).collect();
                let mut v: Vec<Candidate> = present.iter().map(|c| Candidate::Class(c.to_string())).collect();
                v.extend(EXISTENCE_VOCAB.iter().filter(|c| !present.contains(*c)).map(|c| Candidate::Class(c.to_string())));
                v
            }
            Task::RotationEstimation => {
                let kp: BTreeSet<u16> = self.ann.keypoints.iter().map(|k| k.instance).collect();
                ids.iter().filter(|id| kp.contains(id)).map(|&id| Candidate::Keypoints(id)).collect()
            }
            Task::RelativeDistance => {
                let mut v = Vec::new();
                for &a in &ids {
                    let others: Vec<u16> = ids.iter().copied().filter(|&o| o != a).collect();
                    for i in 0..others.len() {
                        for j in i + 1..others.len() {
                            for k in j + 1..others.len() {
                                v.push(Candidate::Choice(a, [others[i], others[j], others[k]]));
                            }
                        }
                    }
                }
                v
            }
            Task::ObjectCounting => match tracking::count_confirmed(&self.ann.tracks, &self.ann.assoc) {
                CountOutcome::Counts(c) => c.keys().map(|k| Candidate::Class(k.clone())).collect(),
                CountOutcome::SceneRejected { total } => {
                    return Err(format!("scene rejected for counting: {total} confirmed objects"));
                }
            },
            Task::ObjectSize | Task::RoutePlan | Task::Navigation | Task::AreaEstimation => {
                ids.iter().map(|&id| Candidate::One(id)).collect()
            }
            Task::AppearanceOrder => {
                let classes: Vec<String> = first_appearances(self.ann).into_keys().collect();
                let mut v = Vec::new();
                for i in 0..classes.len() {
                    for j in i + 1..classes.len() {
                        for k in j + 1..classes.len() {
                            v.push(Candidate::Classes([classes[i].clone(), classes[j].clone(), classes[k].clone()]));
                        }
                    }
                }
                v
            }
            Task::DepthEstimation => {
                let mut v = Vec::new();
                for &id in &ids {
                    for (t, m) in self.ann.masks.iter().enumerate() {
                        if m.data.iter().filter(|&&p| p == id).count() >= MIN_MASK_PIXELS {
                            v.push(Candidate::InFrame(id, t));
                        }
                    }
                }
                v
            }
            Task::ViewChangeInference => (1..self.ann.poses.len()).map(Candidate::Frame).collect(),
            Task::ObjectMatching => {
                let confirmed: Vec<usize> =
                    self.ann.tracks.iter().enumerate().filter(|(_, t)| t.confirmed).map(|(k, _)| k).collect();
                let mut v = Vec::new();
                for &k in &confirmed {
                    v.push(Candidate::Match(k, None));
                    v.extend(confirmed.iter().filter(|&&j| j != k).map(|&j| Candidate::Match(k, Some(j))));
                }
                v
            }
            Task::RoomSize => vec![Candidate::Scene],
        })
    }

    fn realise(&self, task: Task, cand: &Candidate, cfg: &QaConfig, rng: &mut SplitMix64) -> Realised {
        match (task, cand) {
            (Task::PositionComparison, Candidate::Pair(a, b)) => self.position(*a, *b),
            (Task::SizeComparison, Candidate::Pair(a, b)) => self.size_comparison(*a, *b),
            (Task::ExistenceEstimation, Candidate::Class(c)) => Ok(self.existence(c)),
            (Task::RotationEstimation, Candidate::Keypoints(id)) => self.rotation(*id),
            (Task::RelativeDistance, Candidate::Choice(a, others)) => self.relative_distance(*a, others),
            (Task::AbsoluteDistance, Candidate::Pair(a, b)) => self.absolute_distance(*a, *b),
            (Task::ObjectCounting, Candidate::Class(c)) => self.counting(c),
            (Task::ObjectSize, Candidate::One(id)) => self.object_size(*id, rng),
            (Task::RoutePlan, Candidate::One(id)) => self.route(task, *id, rng),
            (Task::Navigation, Candidate::One(id)) => self.route(task, *id, rng),
            (Task::AppearanceOrder, Candidate::Classes(c)) => self.appearance(c),
            (Task::DepthEstimation, Candidate::InFrame(id, t)) => self.depth_at(*id, *t),
            (Task::ViewChangeInference, Candidate::Frame(t)) => self.view_change(*t),
            (Task::ObjectMatching, Candidate::Match(k, other)) => self.matching(*k, *other, rng),
            (Task::SpatialRelation, Candidate::Pair(a, b)) => self.spatial(*a, *b, &cfg.relations),
            (Task::RoomSize, Candidate::Scene) => self.room_size(),
            (Task::AreaEstimation, Candidate::One(id)) => self.area(*id),
            (Task::ObstaclesLocation, Candidate::Pair(a, b)) => self.obstacles(*a, *b),
            (Task::ManipulationPlanning, Candidate::Pair(a, b)) => self.manipulation(*a, *b, rng),
            _ => Err("candidate does not fit the task".to_string()),
        }
    }

    fn item(&self, slots: &[(&str, String)], truth: Truth, mut refs: Refs, semantic: Option<String>) -> Item {
        let slots: BTreeMap<String, String> = slots.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        refs.slots = slots.clone();
        Item { slots, truth, refs, semantic }
    }

    fn named_item(&self, ids: &[u16], slots: &[(&str, String)], truth: Truth, mut refs: Refs) -> Item {
        refs.instances = ids.to_vec();
        let semantic = ids.iter().map(|&i| self.name(i)).collect::<Vec<_>>().join(", ");
        self.item(slots, truth, refs, Some(semantic))
    }

    fn position(&self, a: u16, b: u16) -> Realised {
        let d = self.inst(a).cloud.centroid() - self.inst(b).cloud.centroid();
        let (x, h, z) = (d.x, d.dot(&self.ann.up), d.z);
        if x.abs().min(h.abs()).min(z.abs()) < 0.05 {
            return Err("objects too close along some axis".into());
        }
        let label = position_label(x, h, z);
        let universe = combos(["left", "right"], ["above", "below"], ["closer", "farther"]);
        Ok(self.named_item(&[a, b], &[("a", self.name(a)), ("b", self.name(b))], Truth::Label { label, universe }, Refs::default()))
    }

    fn dims(&self, id: u16) -> std::result::Result<geometry::ObjectDims, String> {
        geometry::object_dims(&self.inst(id).cloud, &self.ann.up).map_err(|e| e.to_string())
    }

    fn size_comparison(&self, a: u16, b: u16) -> Realised {
        let (da, db) = (self.dims(a)?, self.dims(b)?);
        let pairs = [(da.height, db.height), (da.width, db.width), (da.length, db.length)];
        if pairs.iter().any(|(p, q)| (p - q).abs() < 0.1 * p.max(*q)) {
            return Err("sizes differ by less than 10% along some dimension".into());
        }
        let label = size_label(&da, &db);
        let universe = combos(["taller", "shorter"], ["wider", "narrower"], ["thicker", "thinner"]);
        Ok(self.named_item(&[a, b], &[("a", self.name(a)), ("b", self.name(b))], Truth::Label { label, universe }, Refs::default()))
    }

    fn existence(&self, class: &str) -> Item {
        let present = self.ann.objects().any(|i| i.class_name == class);
        let label = if present { "yes" } else { "no" }.to_string();
        let refs = Refs { classes: vec![class.to_string()], ..Refs::default() };
        let truth = Truth::Label { label, universe: vec!["yes".into(), "no".into()] };
        self.item(&[("a", class.to_string())], truth, refs, Some(class.to_string()))
    }

    fn rotation(&self, id: u16) -> Realised {
        let frames: Vec<usize> = self.ann.keypoints.iter().filter(|k| k.instance == id).map(|k| k.frame).collect();
        let (t0, t1) = (*frames.iter().min().ok_or("no keypoints")?, *frames.iter().max().ok_or("no keypoints")?);
        if t0 == t1 {
            return Err("keypoints in a single frame".into());
        }
        let cloud = |t| {
            let pts = self.ann.keypoint_cloud(id, t).ok_or("keypoint without depth")?;
            PointCloud::new(pts, FrameTag::Canonical).map_err(|e| e.to_string())
        };
        let angle = geometry::rotation_angle(&cloud(t0)?, &cloud(t1)?).map_err(|e| e.to_string())?;
        if angle < 1.0 {
            return Err("rotation below one degree".into());
        }
        let refs = Refs { frames: vec![t0, t1], ..Refs::default() };
        let slots = [("a", self.name(id)), ("t0", t0.to_string()), ("t1", t1.to_string())];
        Ok(self.named_item(&[id], &slots, Truth::Quantity { value: angle, unit: Unit::Degrees }, refs))
    }

    fn relative_distance(&self, a: u16, others: &[u16; 3]) -> Realised {
        let ca = &self.inst(a).cloud;
        let mut dist: Vec<(f64, u16)> = others
            .iter()
            .map(|&o| geometry::centroid_distance(ca, &self.inst(o).cloud).map(|d| (d, o)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| e.to_string())?;
        dist.sort_by(|p, q| p.0.total_cmp(&q.0));
        if dist[1].0 < 1.1 * dist[0].0 {
            return Err("nearest candidate is not clearly nearest".into());
        }
        let mut names: Vec<String> = others.iter().map(|&o| self.name(o)).collect();
        names.sort();
        let choices = join_choices(&names, "or");
        let truth = Truth::Label { label: self.name(dist[0].1), universe: names };
        let ids = [a, others[0], others[1], others[2]];
        Ok(self.named_item(&ids, &[("a", self.name(a)), ("choices", choices)], truth, Refs::default()))
    }

    fn absolute_distance(&self, a: u16, b: u16) -> Realised {
        let d = geometry::closest_distance(&self.inst(a).cloud, &self.inst(b).cloud).map_err(|e| e.to_string())?;
        if d < 0.05 {
            return Err("objects nearly touch".into());
        }
        let slots = [("a", self.name(a)), ("b", self.name(b))];
        Ok(self.named_item(&[a, b], &slots, Truth::Quantity { value: d, unit: Unit::Meters }, Refs::default()))
    }

    fn counting(&self, class: &str) -> Realised {
        let CountOutcome::Counts(counts) = tracking::count_confirmed(&self.ann.tracks, &self.ann.assoc) else {
            return Err("scene rejected for counting".into());
        };
        let n = *counts.get(class).ok_or("class not counted")?;
        let refs = Refs { classes: vec![class.to_string()], ..Refs::default() };
        let truth = Truth::Quantity { value: n as f64, unit: Unit::Count };
        Ok(self.item(&[("a", class.to_string())], truth, refs, Some(class.to_string())))
    }

    fn object_size(&self, id: u16, rng: &mut SplitMix64) -> Realised {
        let d = self.dims(id)?;
        let (dimension, value) = [("height", d.height), ("width", d.width), ("length", d.length)][rng.below(3) as usize];
        if value <= 0.0 {
            return Err("degenerate dimension".into());
        }
        let refs = Refs { dimension: Some(dimension.to_string()), ..Refs::default() };
        let slots = [("a", self.name(id)), ("dimension", dimension.to_string())];
        Ok(self.named_item(&[id], &slots, Truth::Quantity { value, unit: Unit::Meters }, refs))
    }

    /// Plan from `start` to the `relation` side of `target`, then re-plan to
    /// goals shifted by one box size along each axis for distractors.
    fn plan_with_distractors(
        &self,
        start: Vec3,
        target: u16,
        relation: Relation,
        exclude: Option<u16>,
        rng: &mut SplitMix64,
        verbalise: &dyn Fn(&Path3) -> std::result::Result<String, String>,
    ) -> std::result::Result<(Path3, Vec3, PlanConfig, String, Vec<String>), String> {
        let obstacles: Vec<Aabb3> = self.boxes.iter().filter(|(id, _)| Some(**id) != exclude).map(|(_, b)| *b).collect();
        let tb = self.boxes.get(&target).ok_or("target has no box")?;
        let mut bounds = Aabb3::new(start, start);
        for b in &obstacles {
            bounds = bounds.union(b);
        }
        let cfg = PlanConfig::for_scene((bounds.max_v() - bounds.min_v()).norm(), rng.next_u64());
        let offset = cfg.clearance + 0.5 * tb.half_extents().max();
        let goal = planner::relation_offset(tb, relation, offset);
        let path = planner::rrt_plan(&start, &goal, &obstacles, &cfg).map_err(|e| e.to_string())?;
        let answer = verbalise(&path)?;
        let shift = 2.0 * tb.half_extents().max() + offset;
        let mut universe = vec![answer.clone()];
        for k in 0..3 {
            for sign in [1.0, -1.0] {
                let mut g = goal;
                g[k] += sign * shift;
                let Ok(p) = planner::rrt_plan(&start, &g, &obstacles, &cfg) else { continue };
                if let Ok(text) = verbalise(&p) {
                    if !universe.contains(&text) {
                        universe.push(text);
                    }
                }
            }
        }
        if universe.len() < 2 {
            return Err("no distinct distractor path".into());
        }
        Ok((path, goal, cfg, answer, universe))
    }

    fn route(&self, task: Task, id: u16, rng: &mut SplitMix64) -> Realised {
        let start = if task == Task::Navigation {
            self.gravity.to_level(&self.ann.poses.last().ok_or("no poses")?.translation)
        } else {
            Vec3::zeros()
        };
        let relation = Relation::ALL[rng.below(Relation::ALL.len() as u64) as usize];
        let verbalise = |p: &Path3| {
            planner::path_to_instructions(p).map(|s| planner::instructions_text(&s)).map_err(|e| e.to_string())
        };
        let (path, goal, plan, label, universe) = self.plan_with_distractors(start, id, relation, None, rng, &verbalise)?;
        let refs = Refs {
            relation: Some(relation.as_str().to_string()),
            start: Some(start.into()),
            goal: Some(goal.into()),
            path: Some(path),
            plan: Some(plan),
            ..Refs::default()
        };
        let slots = [("a", self.name(id)), ("relation", relation.as_str().to_string())];
        Ok(self.named_item(&[id], &slots, Truth::Label { label, universe }, refs))
    }

    fn appearance(&self, classes: &[String; 3]) -> Realised {
        let firsts = first_appearances(self.ann);
        let frames: BTreeSet<usize> = classes.iter().filter_map(|c| firsts.get(c).copied()).collect();
        if frames.len() != 3 {
            return Err("first appearances tie".into());
        }
        let order = tracking::appearance_order(&self.ann.tracks, classes).map_err(|e| e.to_string())?;
        let label = order.join(", ");
        let universe = permutations(classes).into_iter().map(|p| p.join(", ")).collect();
        let refs = Refs { classes: classes.to_vec(), ..Refs::default() };
        Ok(self.item(&[("choices", join_choices(classes, "and"))], Truth::Label { label, universe }, refs, Some(classes.join(", "))))
    }

    fn depth_at(&self, id: u16, t: usize) -> Realised {
        let d = mask_depth(self.ann, id, t).ok_or("no valid depth under the mask")?;
        let refs = Refs { frames: vec![t], ..Refs::default() };
        Ok(self.named_item(&[id], &[("a", self.name(id)), ("t", t.to_string())], Truth::Quantity { value: d, unit: Unit::Meters }, refs))
    }

    fn view_change(&self, t: usize) -> Realised {
        let label = dominant_motion(&self.ann.poses[t].translation).ok_or("camera motion is ambiguous")?;
        let refs = Refs { frames: vec![0, t], ..Refs::default() };
        let truth = Truth::Label { label: label.to_string(), universe: VIEW_DIRECTIONS.iter().map(|s| s.to_string()).collect() };
        Ok(self.item(&[("t", t.to_string())], truth, refs, None))
    }

    fn matching(&self, k: usize, other: Option<usize>, rng: &mut SplitMix64) -> Realised {
        let tracks = &self.ann.tracks;
        let first = &tracks[k];
        let t0 = first.first_frame();
        let box0 = first.observations[&t0];
        let source = &tracks[other.unwrap_or(k)];
        let later: Vec<usize> = source.observations.keys().copied().filter(|&t| t > t0).collect();
        if later.is_empty() {
            return Err("no later observation".into());
        }
        let t1 = later[rng.below(later.len() as u64) as usize];
        let box1 = source.observations[&t1];
        let m = tracking::match_instance((&box0, t0), (&box1, t1), tracks).map_err(|e| e.to_string())?;
        let label = if m == InstanceMatch::Same { "yes" } else { "no" }.to_string();
        let refs = Refs { frames: vec![t0, t1], boxes: vec![bbox_array(&box0), bbox_array(&box1)], ..Refs::default() };
        let slots = [("box0", bbox_text(&box0)), ("t0", t0.to_string()), ("box1", bbox_text(&box1)), ("t1", t1.to_string())];
        Ok(self.item(&slots, Truth::Label { label, universe: vec!["yes".into(), "no".into()] }, refs, None))
    }

    fn spatial(&self, a: u16, b: u16, cfg: &RelationConfig) -> Realised {
        let (rel_scene, index) = relation_scene(self.ann, &self.gravity);
        let (ia, ib) = (index[&a], index[&b]);
        if gravity_gap(&rel_scene.boxes[ia], &rel_scene.boxes[ib]) > 0.3 {
            return Err("objects are not near each other".into());
        }
        let rel: SpatialRelation = rel_scene.classify(ia, ib, cfg);
        let truth = Truth::Label { label: rel.as_str().to_string(), universe: SPATIAL_LABELS.iter().map(|s| s.to_string()).collect() };
        Ok(self.named_item(&[a, b], &[("a", self.name(a)), ("b", self.name(b))], truth, Refs::default()))
    }

    fn room_size(&self) -> Realised {
        let floor = self.ann.floor_cloud().ok_or("no floor")?;
        let area = geometry::room_footprint(&floor, &self.ann.wall_normals(), &self.ann.up).map_err(|e| e.to_string())?;
        Ok(self.item(&[], Truth::Quantity { value: area, unit: Unit::SquareMeters }, Refs::default(), None))
    }

    fn area(&self, id: u16) -> Realised {
        let value = ground_area(&self.inst(id).cloud, &self.gravity);
        if value <= 0.0 {
            return Err("degenerate footprint".into());
        }
        Ok(self.named_item(&[id], &[("a", self.name(id))], Truth::Quantity { value, unit: Unit::SquareMeters }, Refs::default()))
    }

    fn obstacles(&self, a: u16, b: u16) -> Realised {
        let (ba, bb) = (self.boxes.get(&a).ok_or("object has no box")?, self.boxes.get(&b).ok_or("object has no box")?);
        let others: BTreeMap<String, Aabb3> = self
            .boxes
            .iter()
            .filter(|(id, bx)| **id != a && **id != b && !is_beneath(bx, ba) && !is_beneath(bx, bb))
            .map(|(id, bx)| (format!("{id:05}"), *bx))
            .collect();
        let (p0, p1) = (self.gravity.to_level(&self.inst(a).cloud.centroid()), self.gravity.to_level(&self.inst(b).cloud.centroid()));
        let hits = planner::obstructions(&p0, &p1, &others);
        let hit_ids: Vec<u16> = hits.iter().map(|h| h.parse().expect("zero-padded id")).collect();
        let label = if hit_ids.is_empty() {
            "none".to_string()
        } else {
            hit_ids.iter().map(|&i| self.name(i)).collect::<Vec<_>>().join(", ")
        };
        let mut universe = vec!["none".to_string()];
        for id in self.boxes.keys().filter(|&&id| id != a && id != b) {
            let n = self.name(*id);
            if !universe.contains(&n) {
                universe.push(n);
            }
        }
        if !universe.contains(&label) {
            universe.push(label.clone());
        }
        let mut ids = vec![a, b];
        ids.extend(&hit_ids);
        let mut item = self.named_item(&[a, b], &[("a", self.name(a)), ("b", self.name(b))], Truth::Label { label, universe }, Refs::default());
        item.refs.instances = ids;
        Ok(item)
    }

    fn manipulation(&self, a: u16, b: u16, rng: &mut SplitMix64) -> Realised {
        let relation = Relation::ALL[rng.below(Relation::ALL.len() as u64) as usize];
        let start = lifted_start(&self.inst(a).cloud, &self.gravity).ok_or("object has no box")?;
        let intr = self.ann.intrinsics;
        let pose = CameraPose::new(self.gravity.level_rotation(), Vec3::zeros()).map_err(|e| e.to_string())?;
        let verbalise = |p: &Path3| {
            let px = planner::project_path(p, &intr, &pose).map_err(|e| e.to_string())?;
            Ok(polyline_text(&px))
        };
        let (path, goal, plan, label, universe) = self.plan_with_distractors(start, b, relation, Some(a), rng, &verbalise)?;
        let refs = Refs {
            relation: Some(relation.as_str().to_string()),
            start: Some(start.into()),
            goal: Some(goal.into()),
            path: Some(path),
            plan: Some(plan),
            ..Refs::default()
        };
        let slots = [("a", self.name(a)), ("b", self.name(b)), ("relation", relation.as_str().to_string())];
        Ok(self.named_item(&[a, b], &slots, Truth::Label { label, universe }, refs))
    }
}

/// Slack when deciding that a box lies entirely below another one.
pub const SUPPORT_GAP: f64 = 0.02;

/// Whether levelled box `c` lies entirely below `of` (a supporting surface
/// rather than something in the way). The levelled y axis points down.
pub fn is_beneath(c: &Aabb3, of: &Aabb3) -> bool {
    c.min_v().y >= of.max_v().y - SUPPORT_GAP
}

/// Height an object is lifted above its own top before being moved.
pub const LIFT_HEIGHT: f64 = 0.04;

/// Axis-aligned box of a canonical cloud in the levelled frame.
pub fn level_box(cloud: &PointCloud, frame: &GravityFrame) -> Option<Aabb3> {
    let pts: Vec<Vec3> = cloud.points.iter().map(|p| frame.to_level(p)).collect();
    Aabb3::from_points(&pts)
}

/// Start of a manipulation: the object's levelled centroid raised to
/// `LIFT_HEIGHT` above its top.
pub fn lifted_start(cloud: &PointCloud, frame: &GravityFrame) -> Option<Vec3> {
    let b = level_box(cloud, frame)?;
    let c = frame.to_level(&cloud.centroid());
    Some(Vec3::new(c.x, b.min_v().y - LIFT_HEIGHT, c.z))
}

fn gravity_gap(a: &GravityBox, b: &GravityBox) -> f64 {
    (0..3).map(|k| (a.lo[k] - b.hi[k]).max(b.lo[k] - a.hi[k]).max(0.0).powi(2)).sum::<f64>().sqrt()
}

/// "left, above, closer"-style label from the offsets of `a` relative to `b`:
/// `x` along the camera's right axis, `h` along up, `z` along the view axis.
pub fn position_label(x: f64, h: f64, z: f64) -> String {
    format!(
        "{}, {}, {}",
        if x < 0.0 { "left" } else { "right" },
        if h > 0.0 { "above" } else { "below" },
        if z < 0.0 { "closer" } else { "farther" }
    )
}

pub fn size_label(a: &geometry::ObjectDims, b: &geometry::ObjectDims) -> String {
    format!(
        "{}, {}, {}",
        if a.height > b.height { "taller" } else { "shorter" },
        if a.width > b.width { "wider" } else { "narrower" },
        if a.length > b.length { "thicker" } else { "thinner" }
    )
}

fn combos(x: [&str; 2], y: [&str; 2], z: [&str; 2]) -> Vec<String> {
    let mut v = Vec::with_capacity(8);
    for a in x {
        for b in y {
            for c in z {
                v.push(format!("{a}, {b}, {c}"));
            }
        }
    }
    v
}

fn permutations(items: &[String; 3]) -> Vec<Vec<String>> {
    const ORDERS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    ORDERS.iter().map(|o| o.iter().map(|&k| items[k].clone()).collect()).collect()
}

/// "the a, the b, or the c".
fn join_choices(names: &[String], conj: &str) -> String {
    let parts: Vec<String> = names.iter().map(|n| format!("the {n}")).collect();
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        n => format!("{}, {conj} {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

pub fn bbox_array(b: &BBox) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

pub fn bbox_text(b: &BBox) -> String {
    format!("[{}, {}, {}, {}]", b.x1, b.y1, b.x2, b.y2)
}

pub fn polyline_text(points: &[(f64, f64)]) -> String {
    points.iter().map(|(u, v)| format!("({u:.1}, {v:.1})")).collect::<Vec<_>>().join(" -> ")
}

/// First frame of the earliest confirmed track per class.
pub fn first_appearances(ann: &SceneAnnotations) -> BTreeMap<String, usize> {
    let mut firsts: BTreeMap<String, usize> = BTreeMap::new();
    for t in ann.tracks.iter().filter(|t| t.confirmed) {
        let f = firsts.entry(t.class_name.clone()).or_insert(usize::MAX);
        *f = (*f).min(t.first_frame());
    }
    firsts
}

/// Lower median of valid depth under instance `id`'s mask in frame `t`.
pub fn mask_depth(ann: &SceneAnnotations, id: u16, t: usize) -> Option<f64> {
    let mut values: Vec<f64> = ann.masks[t].pixels(id).filter_map(|(x, y)| ann.depth.get(t, y, x)).collect();
    depth::lower_median(&mut values)
}

/// Word for the largest component of a camera displacement expressed in the
/// reference camera frame, or `None` when it does not clearly dominate.
pub fn dominant_motion(delta: &Vec3) -> Option<&'static str> {
    let mut mags: Vec<(f64, usize)> = (0..3).map(|k| (delta[k].abs(), k)).collect();
    mags.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (m, k) = mags[0];
    if m < 1e-3 || mags[1].0 > 0.8 * m {
        return None;
    }
    let positive = delta[k] > 0.0;
    Some(match (k, positive) {
        (0, true) => VIEW_DIRECTIONS[0],
        (0, false) => VIEW_DIRECTIONS[1],
        (1, false) => VIEW_DIRECTIONS[2],
        (1, true) => VIEW_DIRECTIONS[3],
        (_, true) => VIEW_DIRECTIONS[4],
        (_, false) => VIEW_DIRECTIONS[5],
    })
}

/// Area of the convex hull of a cloud projected onto the ground plane.
pub fn ground_area(cloud: &PointCloud, frame: &GravityFrame) -> f64 {
    let flat: Vec<nalgebra::Point2<f64>> =
        cloud.points.iter().map(|p| nalgebra::Point2::new(p.dot(&frame.e1), p.dot(&frame.e2))).collect();
    geometry::polygon_area(&geometry::convex_hull_2d(&flat))
}

/// Gravity boxes for every non-structural object plus walls and ceiling, and
/// the floor height. Returns the scene and an id → box index map.
pub fn relation_scene(ann: &SceneAnnotations, frame: &GravityFrame) -> (RelationScene, BTreeMap<u16, usize>) {
    let mut boxes = Vec::new();
    let mut structural = Vec::new();
    let mut index = BTreeMap::new();
    for inst in ann.instances.values() {
        if inst.class_name == "floor" {
            continue;
        }
        if let Some(b) = GravityBox::from_points(&inst.cloud.points, frame) {
            index.insert(inst.id, boxes.len());
            boxes.push(b);
            structural.push(inst.structural());
        }
    }
    let floor_height = ann.floor_cloud().and_then(|f| {
        let mut h: Vec<f64> = f.points.iter().map(|p| p.dot(&frame.up)).collect();
        depth::lower_median(&mut h)
    });
    (RelationScene { boxes, structural, floor_height }, index)
}

fn sorted_candidates(ctx: &SceneContext<'_>, task: Task, cfg: &QaConfig) -> std::result::Result<Vec<Candidate>, String> {
    let mut c = ctx.candidates(task)?;
    let mut rng = SplitMix64::keyed(cfg.seed, &ctx.ann.scene_id, task.as_str(), u64::MAX);
    rng.shuffle(&mut c);
    Ok(c)
}

struct Realisation {
    item: Item,
    question: String,
    rng: SplitMix64,
}

/// Generate QA records for one scene.
///
/// Items are realised per task (candidates in a seeded order, the first
/// `per_task` that succeed), then emitted item index first, then answer mode,
/// then task, until `max_records` is reached. Generation is a pure function
/// of the annotations and the config.
pub fn build_qa(ann: &SceneAnnotations, cfg: &QaConfig, templates: &TemplateSet) -> QaOutput {
    let mut out = QaOutput::default();
    let ctx = match SceneContext::new(ann) {
        Ok(c) => c,
        Err(e) => {
            out.skipped.push(Skip { task: "*".into(), reason: e.to_string() });
            return out;
        }
    };
    let scene_id = &ann.scene_id;
    let mut per_task: Vec<(Task, Vec<Realisation>)> = Vec::new();
    for &task in &cfg.tasks {
        if let Some(reason) = ctx.gate(task) {
            out.skipped.push(Skip { task: task.to_string(), reason: reason.into() });
            continue;
        }
        let candidates = match sorted_candidates(&ctx, task, cfg) {
            Ok(c) => c,
            Err(reason) => {
                out.skipped.push(Skip { task: task.to_string(), reason });
                continue;
            }
        };
        let mut items = Vec::new();
        let mut last_reason = "no candidates".to_string();
        for cand in &candidates {
            if items.len() >= cfg.per_task {
                break;
            }
            let index = items.len() as u64;
            let mut rng = SplitMix64::keyed(cfg.seed, scene_id, task.as_str(), index);
            match ctx.realise(task, cand, cfg, &mut rng) {
                Ok(item) => match render_template(templates, task, &item.slots, &mut rng) {
                    Ok((t, question)) => {
                        let mut item = item;
                        item.refs.template = t;
                        items.push(Realisation { item, question, rng });
                    }
                    Err(e) => last_reason = e.to_string(),
                },
                Err(reason) => {
                    log::debug!("{scene_id} {task}: candidate {cand:?} skipped: {reason}");
                    last_reason = reason;
                }
            }
        }
        if items.is_empty() {
            out.skipped.push(Skip { task: task.to_string(), reason: last_reason });
        } else {
            per_task.push((task, items));
        }
    }

    let rounds = per_task.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    'emit: for i in 0..rounds {
        for &mode in &cfg.modes {
            for (task, items) in per_task.iter_mut() {
                if out.records.len() >= cfg.max_records {
                    break 'emit;
                }
                let Some(r) = items.get_mut(i) else { continue };
                if !task.supports(mode) {
                    continue;
                }
                match make_record(&ctx, *task, i, mode, r) {
                    Ok(mut rec) => {
                        if let Some(kind) = cfg.referring {
                            if task.refers_instance() {
                                match attach_referring(&rec, kind, ann, templates) {
                                    Ok(with) => rec = with,
                                    Err(e) => log::debug!("{}: no referring input: {e}", rec.id),
                                }
                            }
                        }
                        out.records.push(rec);
                    }
                    Err(e) => out.skipped.push(Skip { task: task.to_string(), reason: format!("item {i} {}: {e}", mode.as_str()) }),
                }
            }
        }
    }
    out
}

fn make_record(ctx: &SceneContext<'_>, task: Task, i: usize, mode: AnswerMode, r: &mut Realisation) -> Result<QaRecord> {
    let item = &r.item;
    let mut rec = QaRecord {
        id: format!("{}-{}-{}-{}", ctx.ann.scene_id, task, i, mode.as_str()),
        scene_id: ctx.ann.scene_id.clone(),
        task,
        question: r.question.clone(),
        answer_mode: mode,
        options: None,
        answer: Answer::Text(String::new()),
        answer_letter: None,
        answer_value: None,
        anchors: Anchors { semantic: item.semantic.clone(), scale: Some(ctx.ann.stats.p95_depth) },
        referring: Referring::None,
        scale_bucket: ctx.bucket,
        refs: item.refs.clone(),
        extra: BTreeMap::new(),
    };
    match (mode, &item.truth) {
        (AnswerMode::Mc, truth) => {
            let distractors = gen_distractors(truth, &mut r.rng)?;
            let answer = truth.display();
            let (options, letter) = arrange_options(&answer, distractors, &mut r.rng);
            rec.options = Some(options);
            rec.answer = Answer::Text(answer);
            rec.answer_letter = Some(letter);
            if let Truth::Quantity { value, unit } = truth {
                rec.answer_value = Some(Quantity { value: *value, unit: *unit });
            }
        }
        (_, Truth::Quantity { value, unit }) => rec.answer = Answer::Quantity { value: *value, unit: *unit },
        (AnswerMode::Free, Truth::Label { label, .. }) => rec.answer = Answer::Text(label.clone()),
        (AnswerMode::Regression, Truth::Label { .. }) => {
            return Err(QaError::InvalidRecord { id: rec.id, reason: "categorical task has no regression form".into() });
        }
    }
    rec.validate()?;
    Ok(rec)
}

// ---------------------------------------------------------------------------
// Referring inputs

/// Mask pixel nearest the mask's centroid (ties go to the first pixel in
/// row-major order).
pub fn centroid_pixel(pixels: &[(usize, usize)]) -> Option<(usize, usize)> {
    if pixels.is_empty() {
        return None;
    }
    let n = pixels.len() as f64;
    let cx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cy = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let d = |p: &(usize, usize)| (p.0 as f64 - cx).powi(2) + (p.1 as f64 - cy).powi(2);
    let mut best = pixels[0];
    for p in &pixels[1..] {
        if d(p) < d(&best) {
            best = *p;
        }
    }
    Some(best)
}

/// Frame in which referring inputs are given.
pub const REFERENCE_FRAME: usize = 0;

/// Replace the name of the first referenced object with a point, box or mask
/// in the reference frame and re-render the question from the same template.
pub fn attach_referring(record: &QaRecord, kind: ReferringKind, ann: &SceneAnnotations, templates: &TemplateSet) -> Result<QaRecord> {
    if !record.task.refers_instance() {
        return Err(QaError::NotReferable(format!("{} names no single object", record.task)));
    }
    let id = *record.refs.instances.first().ok_or_else(|| QaError::NotReferable("record references no instance".into()))?;
    let mask = ann.masks.get(REFERENCE_FRAME).ok_or(QaError::NoMask { instance: id, frame: REFERENCE_FRAME })?;
    let pixels: Vec<(usize, usize)> = mask.pixels(id).collect();
    if pixels.is_empty() {
        return Err(QaError::NoMask { instance: id, frame: REFERENCE_FRAME });
    }
    let (referring, phrase) = match kind {
        ReferringKind::Point => {
            let (u, v) = centroid_pixel(&pixels).expect("non-empty mask");
            (Referring::Point { u: u as u32, v: v as u32 }, format!("object at pixel ({u}, {v})"))
        }
        ReferringKind::Bbox => {
            let mb = scene::mask_bbox(mask, id).expect("non-empty mask");
            let mbox = BBox { x1: mb[0], y1: mb[1], x2: mb[2], y2: mb[3] };
            let track = tracking::track_at(&ann.tracks, REFERENCE_FRAME, &mbox, 0.5)
                .ok_or_else(|| QaError::NotReferable(format!("no track box for instance {id} in frame {REFERENCE_FRAME}")))?;
            let b = ann.tracks.iter().find(|t| t.id == track).expect("track id").observations[&REFERENCE_FRAME];
            (Referring::Bbox { bbox: bbox_array(&b) }, format!("object in box {}", bbox_text(&b)))
        }
        ReferringKind::Mask => (Referring::Mask { mask_id: id }, format!("object covered by mask {id}")),
    };
    let template = templates.get(record.task).get(record.refs.template).ok_or(QaError::NoTemplates(record.task))?;
    let mut slots = record.refs.slots.clone();
    slots.insert("a".into(), phrase);
    let mut out = record.clone();
    out.question = fill_template(template, &slots)?;
    out.referring = referring;
    Ok(out)
}

/// Instance designated by a referring input in the reference frame.
pub fn resolve_referring(referring: &Referring, ann: &SceneAnnotations) -> Option<u16> {
    let mask = ann.masks.get(REFERENCE_FRAME)?;
    match referring {
        Referring::None => None,
        Referring::Point { u, v } => Some(mask.get(*u as usize, *v as usize)).filter(|&id| id != 0),
        Referring::Bbox { bbox } => {
            let b = BBox { x1: bbox[0], y1: bbox[1], x2: bbox[2], y2: bbox[3] };
            mask.ids()
                .into_iter()
                .filter_map(|id| {
                    let m = scene::mask_bbox(mask, id)?;
                    let v = tracking::iou(&b, &BBox { x1: m[0], y1: m[1], x2: m[2], y2: m[3] }).ok()?;
                    Some((v, id))
                })
                .filter(|(v, _)| *v >= 0.5)
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|(_, id)| id)
        }
        Referring::Mask { mask_id } => mask.data.contains(mask_id).then_some(*mask_id),
    }
}
