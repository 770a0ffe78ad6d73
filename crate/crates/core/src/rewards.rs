//! Anchored-response parsing, the per-anchor rewards, their progressive
//! chaining, and group-relative policy optimisation on a categorical toy
//! policy.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{self, AnswerIssue, Target};
use crate::rng::fnv1a64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("response has no <answer> tag")]
    MissingAnswerTag,
    #[error("malformed scale {0:?}")]
    MalformedScale(String),
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("zero embedding vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchoredResponse {
    pub think: Option<String>,
    pub semantics: Option<String>,
    /// Meters.
    pub scale: Option<f64>,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    Think,
    Semantics,
    Scale,
    Answer,
}

impl Tag {
    pub const CANONICAL: [Tag; 4] = [Tag::Think, Tag::Semantics, Tag::Scale, Tag::Answer];

    pub fn name(&self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::Semantics => "semantics",
            Tag::Scale => "scale",
            Tag::Answer => "answer",
        }
    }

    fn from_name(s: &str) -> Option<Tag> {
        Tag::CANONICAL.into_iter().find(|t| t.name() == s)
    }
}

static TAG_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<(/?)(think|semantics|scale|answer)>").expect("static regex"));

/// Contents of the first `<name>...</name>` pair.
pub fn tag_contents<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let open = format!("<{name}>");
    let close = format!("</{name}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(&text[start..end])
}

pub fn parse_anchors(text: &str) -> Result<AnchoredResponse, RewardError> {
    let answer = tag_contents(text, "answer").ok_or(RewardError::MissingAnswerTag)?;
    let scale = match tag_contents(text, "scale") {
        None => None,
        Some(s) => Some(parse_scale(s)?),
    };
    Ok(AnchoredResponse {
        think: tag_contents(text, "think").map(|s| s.trim().to_string()),
        semantics: tag_contents(text, "semantics").map(|s| s.trim().to_string()),
        scale,
        answer: answer.trim().to_string(),
    })
}

fn parse_scale(s: &str) -> Result<f64, RewardError> {
    let malformed = || RewardError::MalformedScale(s.trim().to_string());
    let (value, unit) = answer::parse_number(s).ok_or_else(malformed)?;
    let meters = answer::normalize_number(value, unit.as_deref(), answer::Unit::Meters).map_err(|_| malformed())?;
    if meters > 0.0 && meters.is_finite() {
        Ok(meters)
    } else {
        Err(malformed())
    }
}

/// 1 when every required tag appears exactly once, tags do not nest or
/// overlap, every opened tag is closed, and the tags that appear follow the
/// order think, semantics, scale, answer.
pub fn r_format(text: &str, required: &[Tag]) -> f64 {
    let mut open: Option<Tag> = None;
    let mut seen: Vec<Tag> = Vec::new();
    for cap in TAG_TOKEN.captures_iter(text) {
        let closing = !cap[1].is_empty();
        let tag = Tag::from_name(&cap[2]).expect("regex restricts names");
        match (open, closing) {
            (None, false) => {
                if seen.last().is_some_and(|&last| last >= tag) {
                    return 0.0;
                }
                open = Some(tag);
            }
            (Some(o), true) if o == tag => {
                seen.push(tag);
                open = None;
            }
            _ => return 0.0,
        }
    }
    if open.is_some() || !required.iter().all(|t| seen.contains(t)) {
        return 0.0;
    }
    1.0
}

/// Answer reward; unparsable or unit-incompatible predictions score 0 and
/// report why.
pub fn r_answer(pred: &str, target: &Target) -> (f64, Option<AnswerIssue>) {
    let Some(parsed) = answer::parse_for_target(pred, target) else {
        return (0.0, Some(AnswerIssue::Unparsable));
    };
    match answer::score_answer(&parsed, target) {
        Ok(v) => (v, None),
        Err(issue) => (0.0, Some(issue)),
    }
}

/// `max(0, 1 - |ln c_ans - ln c_gt| / 2)`.
pub fn r_scale(c_ans: f64, c_gt: f64) -> Result<f64, RewardError> {
    for c in [c_ans, c_gt] {
        if !(c > 0.0 && c.is_finite()) {
            return Err(RewardError::NonPositiveScale(c));
        }
    }
    Ok((1.0 - (c_ans.ln() - c_gt.ln()).abs() / 2.0).max(0.0))
}

/// Cosine similarity clamped to `[0, 1]`.
pub fn r_semantic(e_ans: &[f64], e_gt: &[f64]) -> Result<f64, RewardError> {
    if e_ans.len() != e_gt.len() {
        return Err(RewardError::DimMismatch(e_ans.len(), e_gt.len()));
    }
    let na2: f64 = e_ans.iter().map(|v| v * v).sum();
    let nb2: f64 = e_gt.iter().map(|v| v * v).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(RewardError::ZeroVector);
    }
    let dot: f64 = e_ans.iter().zip(e_gt).map(|(a, b)| a * b).sum();
    // sqrt of the product keeps identical vectors at exactly 1.
    Ok((dot / (na2 * nb2).sqrt()).clamp(0.0, 1.0))
}

pub trait EmbeddingProvider {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Bag of lowercase alphanumeric unigrams hashed into a fixed number of
/// count buckets.
#[derive(Debug, Clone, Copy)]
pub struct HashedBagOfWords {
    pub dim: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        HashedBagOfWords { dim: 256 }
    }
}

impl EmbeddingProvider for HashedBagOfWords {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let bucket = (fnv1a64(token.to_lowercase().as_bytes()) % self.dim as u64) as usize;
            v[bucket] += 1.0;
        }
        v
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequiredAnchors {
    pub scale: bool,
    pub semantic: bool,
}

impl RequiredAnchors {
    pub const BOTH: RequiredAnchors = RequiredAnchors { scale: true, semantic: true };
    pub const NONE: RequiredAnchors = RequiredAnchors { scale: false, semantic: false };

    pub fn tags(&self) -> Vec<Tag> {
        let mut t = vec![Tag::Think];
        if self.semantic {
            t.push(Tag::Semantics);
        }
        if self.scale {
            t.push(Tag::Scale);
        }
        t.push(Tag::Answer);
        t
    }
}

/// Chained sum over the required anchors in the order answer, scale,
/// semantic: each term is the product of all rewards up to that point, so a
/// later anchor only pays in proportion to the earlier ones. Absent anchors
/// drop out of the chain.
pub fn progressive_reward(r_answer: f64, r_scale: f64, r_semantic: f64, required: RequiredAnchors) -> f64 {
    let mut total = r_answer;
    let mut prod = r_answer;
    if required.scale {
        prod *= r_scale;
        total += prod;
    }
    if required.semantic {
        prod *= r_semantic;
        total += prod;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_answer: f64,
    pub r_scale: f64,
    pub r_semantic: f64,
    pub r_bar: f64,
}

/// Ground truth needed to score one anchored response.
#[derive(Debug, Clone)]
pub struct RewardTarget<'a> {
    pub target: &'a Target,
    pub semantic: Option<&'a str>,
    pub scale: Option<f64>,
    pub required: RequiredAnchors,
}

pub fn score_response(text: &str, gt: &RewardTarget<'_>, embedder: &dyn EmbeddingProvider) -> RewardBreakdown {
    let r_format = r_format(text, &gt.required.tags());
    let parsed = parse_anchors(text);
    let (r_answer, r_scale, r_semantic) = match &parsed {
        Err(_) => (0.0, 0.0, 0.0),
        Ok(resp) => {
            let ra = r_answer(&resp.answer, gt.target).0;
            let rs = match (resp.scale, gt.scale) {
                (Some(a), Some(b)) => r_scale(a, b).unwrap_or(0.0),
                _ => 0.0,
            };
            let rsem = match (&resp.semantics, gt.semantic) {
                (Some(a), Some(b)) => r_semantic(&embedder.embed(a), &embedder.embed(b)).unwrap_or(0.0),
                _ => 0.0,
            };
            (ra, rs, rsem)
        }
    };
    let r_bar = progressive_reward(r_answer, r_scale, r_semantic, gt.required);
    RewardBreakdown { r_format, r_answer, r_scale, r_semantic, r_bar }
}

/// `(R_i - mean) / std` with the population standard deviation; a group
/// whose spread is below `1e-8` gets all-zero advantages.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    let g = rewards.len();
    if g < 2 {
        return Err(RewardError::GroupTooSmall(g));
    }
    let n = g as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= 1e-8) {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Categorical toy policy: every response is a token sequence drawn from a
/// single distribution over `K` tokens, parameterised by logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGroup {
    pub new_logits: Vec<f64>,
    pub old_logits: Vec<f64>,
    pub ref_logits: Vec<f64>,
    pub responses: Vec<Vec<usize>>,
    pub advantages: Vec<f64>,
}

impl PolicyGroup {
    pub fn from_rewards(
        new_logits: Vec<f64>,
        old_logits: Vec<f64>,
        ref_logits: Vec<f64>,
        responses: Vec<Vec<usize>>,
        rewards: &[f64],
    ) -> Result<Self, RewardError> {
        let advantages = grpo_advantages(rewards)?;
        let group = PolicyGroup { new_logits, old_logits, ref_logits, responses, advantages };
        group.validate()?;
        Ok(group)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let k = self.new_logits.len();
        if k == 0 {
            return Err(RewardError::InvalidDistribution("empty vocabulary".into()));
        }
        if self.old_logits.len() != k || self.ref_logits.len() != k {
            return Err(RewardError::DimMismatch(self.old_logits.len().max(self.ref_logits.len()), k));
        }
        let all = self.new_logits.iter().chain(&self.old_logits).chain(&self.ref_logits);
        if all.clone().any(|z| !z.is_finite()) {
            return Err(RewardError::InvalidDistribution("non-finite logit".into()));
        }
        if self.responses.len() < 2 {
            return Err(RewardError::GroupTooSmall(self.responses.len()));
        }
        if self.advantages.len() != self.responses.len() {
            return Err(RewardError::DimMismatch(self.advantages.len(), self.responses.len()));
        }
        for r in &self.responses {
            if r.is_empty() || r.iter().any(|&t| t >= k) {
                return Err(RewardError::InvalidDistribution("response token outside vocabulary".into()));
            }
        }
        Ok(())
    }
}

/// Exact `KL(p || q)` for categorical distributions.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()).sum()
}

/// Clipped surrogate minus the KL penalty, and its gradient with respect to
/// the new policy's logits.
pub fn grpo_objective(group: &PolicyGroup, epsilon: f64, beta: f64) -> Result<(f64, Vec<f64>), RewardError> {
    if !(epsilon > 0.0) {
        return Err(RewardError::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(beta >= 0.0) || beta.is_infinite() {
        return Err(RewardError::InvalidParameter(format!("beta must be finite and non-negative, got {beta}")));
    }
    group.validate()?;
    let k = group.new_logits.len();
    let p = softmax(&group.new_logits);
    let p_old = softmax(&group.old_logits);
    let p_ref = softmax(&group.ref_logits);
    let g = group.responses.len() as f64;

    let mut surrogate = 0.0;
    let mut grad = vec![0.0; k];
    for (tokens, &a) in group.responses.iter().zip(&group.advantages) {
        let log_ratio: f64 = tokens.iter().map(|&t| p[t].ln() - p_old[t].ln()).sum();
        let rho = log_ratio.exp();
        let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
        let unclipped_term = rho * a;
        let clipped_term = clipped * a;
        if unclipped_term <= clipped_term {
            surrogate += unclipped_term;
            // d ln p_t / dz = e_t - p, summed over the sequence.
            let n = tokens.len() as f64;
            for (j, gj) in grad.iter_mut().enumerate() {
                let count = tokens.iter().filter(|&&t| t == j).count() as f64;
                *gj += a * rho * (count - n * p[j]) / g;
            }
        } else {
            surrogate += clipped_term;
        }
    }
    let kl = categorical_kl(&p, &p_ref);
    let objective = surrogate / g - beta * kl;
    if beta > 0.0 {
        for (j, gj) in grad.iter_mut().enumerate() {
            if p[j] > 0.0 {
                *gj -= beta * p[j] * ((p[j] / p_ref[j]).ln() - kl);
            }
        }
    }
    Ok((objective, grad))
}
