//! Answer values, unit normalisation and the item-level score shared by the
//! training reward and the benchmark harness.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    Mc,
    Regression,
    Free,
}

impl AnswerMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnswerMode::Mc => "mc",
            AnswerMode::Regression => "regression",
            AnswerMode::Free => "free",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "mc" => Some(AnswerMode::Mc),
            "regression" | "reg" => Some(AnswerMode::Regression),
            "free" => Some(AnswerMode::Free),
            _ => None,
        }
    }
}

/// Unit a numeric ground truth is stored in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "m")]
    Meters,
    #[serde(rename = "m2")]
    SquareMeters,
    #[serde(rename = "deg")]
    Degrees,
    #[serde(rename = "count")]
    Count,
}

impl Unit {
    pub fn symbol(&self) -> &'static str {
        match self {
            Unit::Meters => "m",
            Unit::SquareMeters => "m2",
            Unit::Degrees => "deg",
            Unit::Count => "count",
        }
    }
}

/// Ground-truth answer as stored in a QA record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Quantity { value: f64, unit: Unit },
    Text(String),
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Quantity { value, unit } => f.write_str(&format_quantity(*value, *unit)),
            Answer::Text(t) => f.write_str(t),
        }
    }
}

/// What a prediction is scored against.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Choice(char),
    Quantity { value: f64, unit: Unit },
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedAnswer {
    Letter(char),
    Number { value: f64, unit: Option<String> },
    Text(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnswerIssue {
    #[error("answer could not be parsed")]
    Unparsable,
    #[error("unit {0:?} is incompatible with the ground truth")]
    UnitMismatch(String),
}

/// Meters per unit for the fixed length table.
pub fn length_factor(unit: &str) -> Option<f64> {
    let u = unit.trim().trim_end_matches('.').to_ascii_lowercase();
    let f = match u.as_str() {
        "mm" | "millimeter" | "millimeters" | "millimetre" | "millimetres" => 0.001,
        "cm" | "centimeter" | "centimeters" | "centimetre" | "centimetres" => 0.01,
        "m" | "meter" | "meters" | "metre" | "metres" => 1.0,
        "km" | "kilometer" | "kilometers" | "kilometre" | "kilometres" => 1000.0,
        "in" | "inch" | "inches" => 0.0254,
        "ft" | "foot" | "feet" => 0.3048,
        _ => return None,
    };
    Some(f)
}

fn is_angle_unit(u: &str) -> Option<f64> {
    match u {
        "deg" | "degree" | "degrees" | "°" => Some(1.0),
        "rad" | "radian" | "radians" => Some(180.0 / std::f64::consts::PI),
        _ => None,
    }
}

fn area_factor(u: &str) -> Option<f64> {
    let compact: String = u.split_whitespace().collect::<Vec<_>>().join(" ");
    match compact.as_str() {
        "m2" | "m²" | "m^2" | "sqm" | "sq m" | "square meter" | "square meters" | "square metre" | "square metres" => {
            Some(1.0)
        }
        "ft2" | "ft²" | "sq ft" | "square foot" | "square feet" => Some(0.092_903_04),
        _ => None,
    }
}

/// Convert a parsed number into the ground-truth unit.
pub fn normalize_number(value: f64, unit: Option<&str>, target: Unit) -> Result<f64, AnswerIssue> {
    let raw = match unit {
        None => return Ok(value),
        Some(u) => u.trim().trim_end_matches(['.', ',', ';', ')']).to_lowercase(),
    };
    if raw.is_empty() {
        return Ok(value);
    }
    match target {
        Unit::Count => Ok(value),
        Unit::Meters => {
            let word = raw.split_whitespace().next().unwrap_or("");
            if let Some(f) = length_factor(word) {
                Ok(value * f)
            } else if is_angle_unit(word).is_some() || area_factor(&raw).is_some() {
                Err(AnswerIssue::UnitMismatch(raw))
            } else {
                Err(AnswerIssue::Unparsable)
            }
        }
        Unit::SquareMeters => {
            if let Some(f) = area_factor(&raw) {
                Ok(value * f)
            } else if length_factor(raw.split_whitespace().next().unwrap_or("")).is_some() {
                Err(AnswerIssue::UnitMismatch(raw))
            } else {
                Err(AnswerIssue::Unparsable)
            }
        }
        Unit::Degrees => {
            let word = raw.split_whitespace().next().unwrap_or("");
            if let Some(f) = is_angle_unit(word) {
                Ok(value * f)
            } else if length_factor(word).is_some() {
                Err(AnswerIssue::UnitMismatch(raw))
            } else {
                Err(AnswerIssue::Unparsable)
            }
        }
    }
}

static NUMBER_UNIT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(-?\d+(?:\.\d+)?(?:e-?\d+)?)\s*((?:square|sq)\s+[a-z]+|[a-z°²^0-9]+)?").expect("static regex")
});

/// First number in `text` with the unit token that follows it, if any.
pub fn parse_number(text: &str) -> Option<(f64, Option<String>)> {
    NUMBER_UNIT.captures(text).and_then(|c| capture_number(&c))
}

/// Last number in `text` with its unit token.
pub fn parse_last_number(text: &str) -> Option<(f64, Option<String>)> {
    NUMBER_UNIT.captures_iter(text).last().and_then(|c| capture_number(&c))
}

fn capture_number(c: &regex::Captures<'_>) -> Option<(f64, Option<String>)> {
    let value: f64 = c.get(1)?.as_str().parse().ok()?;
    let unit = c.get(2).map(|m| m.as_str().to_string()).filter(|u| !u.chars().all(|ch| ch.is_ascii_digit()));
    value.is_finite().then_some((value, unit))
}

/// Relative errors this close to a tolerance count as reaching it, so that an
/// error of exactly 10% fails the 0.1 tolerance whichever way `1.1 * gt`
/// happens to round.
pub const MRA_BOUNDARY_SLACK: f64 = 1e-12;

/// Mean relative accuracy over confidence thresholds 0.50, 0.55, ..., 0.95:
/// the fraction of thresholds `theta` with `|pred - gt| / |gt| < 1 - theta`.
pub fn mean_relative_accuracy(pred: f64, gt: f64) -> f64 {
    if !pred.is_finite() {
        return 0.0;
    }
    let rel = if gt == 0.0 {
        if pred == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        (pred - gt).abs() / gt.abs()
    };
    let passed = (0..10).filter(|k| rel < f64::from(50 - 5 * k) / 100.0 - MRA_BOUNDARY_SLACK).count();
    passed as f64 / 10.0
}

/// Case- and whitespace-insensitive form used for text answers.
pub fn normalize_text(s: &str) -> String {
    s.trim()
        .trim_end_matches(['.', '!', ';'])
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Score one parsed prediction against its target, in `[0, 1]`.
pub fn score_answer(pred: &ParsedAnswer, target: &Target) -> Result<f64, AnswerIssue> {
    match (target, pred) {
        (Target::Choice(c), ParsedAnswer::Letter(p)) => Ok(if c.eq_ignore_ascii_case(p) { 1.0 } else { 0.0 }),
        (Target::Choice(c), ParsedAnswer::Text(t)) => {
            let t = t.trim();
            let letter = t.chars().next().filter(|_| t.len() == 1).ok_or(AnswerIssue::Unparsable)?;
            Ok(if c.eq_ignore_ascii_case(&letter) { 1.0 } else { 0.0 })
        }
        (Target::Quantity { value, unit }, ParsedAnswer::Number { value: p, unit: pu }) => {
            let p = normalize_number(*p, pu.as_deref(), *unit)?;
            Ok(mean_relative_accuracy(p, *value))
        }
        (Target::Text(gt), ParsedAnswer::Text(p)) => Ok(if normalize_text(gt) == normalize_text(p) { 1.0 } else { 0.0 }),
        (Target::Text(gt), ParsedAnswer::Letter(p)) => {
            Ok(if normalize_text(gt) == p.to_ascii_lowercase().to_string() { 1.0 } else { 0.0 })
        }
        _ => Err(AnswerIssue::Unparsable),
    }
}

/// Parse free text into the shape the target expects (no tag handling).
pub fn parse_for_target(text: &str, target: &Target) -> Option<ParsedAnswer> {
    let t = text.trim();
    match target {
        Target::Choice(_) => {
            let stripped = t.trim_matches(|c: char| c == '(' || c == ')' || c == '.' || c.is_whitespace());
            let first = stripped.chars().next()?;
            let standalone = stripped.chars().nth(1).is_none_or(|c| !c.is_alphanumeric());
            (first.is_ascii_uppercase() && standalone).then_some(ParsedAnswer::Letter(first))
        }
        Target::Quantity { .. } => parse_number(t).map(|(value, unit)| ParsedAnswer::Number { value, unit }),
        Target::Text(_) => (!t.is_empty()).then(|| ParsedAnswer::Text(t.to_string())),
    }
}

/// Display form used for options and templates. Lengths pick a readable
/// unit; the string is what distinctness of options is judged on.
pub fn format_quantity(value: f64, unit: Unit) -> String {
    match unit {
        Unit::Meters => {
            let a = value.abs();
            if a < 0.01 {
                format!("{:.1} mm", value * 1000.0)
            } else if a < 1.0 {
                format!("{:.1} cm", value * 100.0)
            } else if a < 1000.0 {
                format!("{value:.2} m")
            } else {
                format!("{:.3} km", value / 1000.0)
            }
        }
        Unit::SquareMeters => format!("{value:.2} m2"),
        Unit::Degrees => format!("{value:.1} degrees"),
        Unit::Count => format!("{}", value.round() as i64),
    }
}
