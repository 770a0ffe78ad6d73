//! Benchmark scoring: pull an answer out of a model response, score it
//! against the record's ground truth, and aggregate per scale bucket and
//! task.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;
use thiserror::Error;

use crate::answer::{self, AnswerIssue, Target, Unit};
use crate::qagen::{QaRecord, ScaleBucket, Task};
use crate::rewards::tag_contents;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no items to aggregate")]
    NoItems,
    #[error("prediction {0:?} has no matching QA record")]
    UnknownId(String),
}

/// One model response for one QA record. Rows sharing a `group` are samples
/// of the same prompt (used for group-relative advantages).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// Shape of the answer a record expects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Expected {
    /// Option letter among the first `n` capitals.
    Letter(usize),
    Number(Unit),
    Text,
}

impl Expected {
    pub fn of(record: &QaRecord) -> Self {
        match (&record.options, record.target()) {
            (Some(o), Target::Choice(_)) => Expected::Letter(o.len()),
            (None, Target::Choice(_)) => Expected::Letter(26),
            (_, Target::Quantity { unit, .. }) => Expected::Number(unit),
            (_, Target::Text(_)) => Expected::Text,
        }
    }
}

/// An extracted answer; numbers are already in the record's unit.
#[derive(Debug, Clone, PartialEq)]
pub enum Extracted {
    Letter(char),
    Value(f64),
    Text(String),
}

impl fmt::Display for Extracted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extracted::Letter(c) => write!(f, "{c}"),
            Extracted::Value(v) => write!(f, "{v}"),
            Extracted::Text(t) => f.write_str(t),
        }
    }
}

static STANDALONE_CAPITAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Z])\b").expect("static regex"));

fn last_letter(text: &str, n: usize) -> Option<char> {
    STANDALONE_CAPITAL
        .captures_iter(text)
        .filter_map(|c| c[1].chars().next())
        .filter(|c| ((*c as u8 - b'A') as usize) < n)
        .last()
}

fn number_in(text: &str, unit: Unit, last: bool) -> Result<f64, AnswerIssue> {
    let found = if last { answer::parse_last_number(text) } else { answer::parse_number(text) };
    let (value, u) = found.ok_or(AnswerIssue::Unparsable)?;
    answer::normalize_number(value, u.as_deref(), unit)
}

/// Text between `<answer>` tags wins; without tags, multiple-choice falls
/// back to the last standalone option letter and numeric answers to the last
/// number with its unit. Lengths are normalised through the fixed unit table
/// (mm, cm, m, km, in, ft); an unknown unit is unparsable.
pub fn extract_answer(text: &str, expected: Expected) -> Result<Extracted, AnswerIssue> {
    let tagged = tag_contents(text, "answer").map(str::trim);
    match expected {
        Expected::Letter(n) => {
            let from_tag = tagged.and_then(|t| {
                match answer::parse_for_target(t, &Target::Choice('A')) {
                    Some(answer::ParsedAnswer::Letter(c)) if ((c as u8 - b'A') as usize) < n => Some(c),
                    _ => last_letter(t, n),
                }
            });
            from_tag.or_else(|| last_letter(text, n)).map(Extracted::Letter).ok_or(AnswerIssue::Unparsable)
        }
        Expected::Number(unit) => match tagged {
            Some(t) => number_in(t, unit, false),
            None => number_in(text, unit, true),
        }
        .map(Extracted::Value),
        Expected::Text => {
            let t = tagged.unwrap_or(text.trim());
            if t.is_empty() { Err(AnswerIssue::Unparsable) } else { Ok(Extracted::Text(t.to_string())) }
        }
    }
}

/// Item score in `[0, 1]`: exact match for letters and text, mean relative
/// accuracy for numbers. Anything that failed to parse or has the wrong
/// shape scores 0.
pub fn score_item(pred: &Result<Extracted, AnswerIssue>, gt: &Target) -> f64 {
    match (pred, gt) {
        (Ok(Extracted::Letter(p)), Target::Choice(c)) => f64::from(u8::from(p == c)),
        (Ok(Extracted::Value(v)), Target::Quantity { value, .. }) => answer::mean_relative_accuracy(*v, *value),
        (Ok(Extracted::Text(p)), Target::Text(t)) => {
            f64::from(u8::from(answer::normalize_text(p) == answer::normalize_text(t)))
        }
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub bucket: ScaleBucket,
    pub task: Task,
    pub score: f64,
}

/// Score every prediction against its record. Records without any
/// prediction count as unanswered (score 0).
pub fn score_predictions(records: &[QaRecord], predictions: &[Prediction]) -> Result<Vec<ScoredItem>, EvalError> {
    let by_id: BTreeMap<&str, &QaRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut answered = BTreeSet::new();
    let mut out = Vec::with_capacity(predictions.len().max(records.len()));
    for p in predictions {
        let r = by_id.get(p.id.as_str()).ok_or_else(|| EvalError::UnknownId(p.id.clone()))?;
        let parsed = extract_answer(&p.response, Expected::of(r));
        if let Err(e) = &parsed {
            log::warn!("{}: {e}", p.id);
        }
        answered.insert(p.id.as_str());
        out.push(ScoredItem { id: r.id.clone(), bucket: r.scale_bucket, task: r.task, score: score_item(&parsed, &r.target()) });
    }
    for r in records.iter().filter(|r| !answered.contains(r.id.as_str())) {
        log::warn!("{}: no prediction", r.id);
        out.push(ScoredItem { id: r.id.clone(), bucket: r.scale_bucket, task: r.task, score: 0.0 });
    }
    Ok(out)
}

/// Score rounded to six decimals; serialises as a fixed-point JSON number
/// so reports are byte-stable.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Fixed6(pub f64);

impl Fixed6 {
    pub fn new(x: f64) -> Self {
        Fixed6((x * 1e6).round() / 1e6)
    }
}

impl Serialize for Fixed6 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(format!("{:.6}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Fixed6 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(Fixed6::new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub count: usize,
    pub mean: Fixed6,
}

/// Columns of the headline table. Buckets without items are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub indoor: Option<Fixed6>,
    pub outdoor: Option<Fixed6>,
    pub overall: Fixed6,
    pub tabletop: Option<Fixed6>,
    pub tiny_tabletop: Option<Fixed6>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Unweighted mean of bucket means.
    #[default]
    Bucket,
    /// Mean over all items.
    Item,
}

/// Fields are declared in key order so the serialised report has sorted keys
/// without an intermediate map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Per bucket name: mean over its tasks' means, and its item count.
    pub buckets: BTreeMap<String, Cell>,
    /// Per bucket and task name: item count and mean score.
    pub cells: BTreeMap<String, BTreeMap<String, Cell>>,
    pub items: usize,
    pub overall: Fixed6,
    pub overall_bucket_weighted: Fixed6,
    pub overall_item_weighted: Fixed6,
    pub table: TableRow,
    pub weighting: Weighting,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Unweighted mean within each (bucket, task); a bucket's score is the mean
/// of its task means; overall is the mean of bucket means (or of all items
/// with `Weighting::Item`). Empty buckets are omitted. Summation runs in a
/// canonical order so the result does not depend on item order.
pub fn aggregate(items: &[ScoredItem], weighting: Weighting) -> Result<ScoreReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::NoItems);
    }
    let mut groups: BTreeMap<ScaleBucket, BTreeMap<Task, Vec<f64>>> = BTreeMap::new();
    for it in items {
        groups.entry(it.bucket).or_default().entry(it.task).or_default().push(it.score);
    }
    let mut cells = BTreeMap::new();
    let mut buckets = BTreeMap::new();
    let mut bucket_means = Vec::new();
    for (bucket, tasks) in &mut groups {
        let mut task_means = Vec::new();
        let mut row = BTreeMap::new();
        let mut count = 0;
        for (task, scores) in tasks.iter_mut() {
            scores.sort_by(f64::total_cmp);
            let m = mean(scores.iter().copied());
            task_means.push(m);
            count += scores.len();
            row.insert(task.to_string(), Cell { count: scores.len(), mean: Fixed6::new(m) });
        }
        let bm = mean(task_means);
        bucket_means.push((*bucket, bm));
        buckets.insert(bucket.as_str().to_string(), Cell { count, mean: Fixed6::new(bm) });
        cells.insert(bucket.as_str().to_string(), row);
    }
    let by_bucket = mean(bucket_means.iter().map(|(_, m)| *m));
    let mut all: Vec<f64> = items.iter().map(|i| i.score).collect();
    all.sort_by(f64::total_cmp);
    let by_item = mean(all);
    let overall = Fixed6::new(match weighting {
        Weighting::Bucket => by_bucket,
        Weighting::Item => by_item,
    });
    let col = |b: ScaleBucket| buckets.get(b.as_str()).map(|c: &Cell| c.mean);
    let table = TableRow {
        tiny_tabletop: col(ScaleBucket::TinyTabletop),
        tabletop: col(ScaleBucket::Tabletop),
        indoor: col(ScaleBucket::Indoor),
        outdoor: col(ScaleBucket::Outdoor),
        overall,
    };
    Ok(ScoreReport {
        buckets,
        cells,
        items: items.len(),
        overall,
        overall_bucket_weighted: Fixed6::new(by_bucket),
        overall_item_weighted: Fixed6::new(by_item),
        table,
        weighting,
    })
}

impl ScoreReport {
    /// Pretty JSON with sorted keys and six-decimal scores, newline-terminated.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
