//! The subcommands. Each returns what it wrote so `main` can report it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use scaleforge::answer::AnswerMode;
use scaleforge::depth::{self, DEFAULT_LAMBDA};
use scaleforge::eval::{self, Prediction, ScoreReport, Weighting};
use scaleforge::formats;
use scaleforge::fusion::{self, CheckConfig, CheckOutcome};
use scaleforge::qagen::{self, QaConfig, QaRecord, ReferringKind, Skip, Task, TemplateSet};
use scaleforge::rewards::{self, HashedBagOfWords, RequiredAnchors, RewardBreakdown, RewardTarget};
use scaleforge::scene::{self, AnnotationConfig, SceneAnnotations, SceneBundle};
use scaleforge::synth;

/// An error with a fixed process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub const EXIT_CHECK: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_EMPTY: u8 = 3;
pub const EXIT_ALIGN: u8 = 4;

pub fn fail(code: u8, kind: &'static str, message: impl Into<String>) -> anyhow::Error {
    Failure { code, kind, message: message.into() }.into()
}

fn input<T, E: fmt::Display>(r: Result<T, E>, what: &str) -> anyhow::Result<T> {
    r.map_err(|e| fail(EXIT_INPUT, "input", format!("{what}: {e}")))
}

pub const QA_FILE: &str = "qa.jsonl";
pub const SKIP_FILE: &str = "skipped.jsonl";
pub const REWARDS_FILE: &str = "rewards.jsonl";
pub const ADVANTAGES_FILE: &str = "advantages.jsonl";

/// Run `f` over `items` on a pool of `jobs` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(&T) -> anyhow::Result<R> + Sync + Send,
) -> anyhow::Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().context("building thread pool")?;
    pool.install(|| items.par_iter().map(&f).collect::<Vec<_>>()).into_iter().collect()
}

// ---------------------------------------------------------------- prepare

#[derive(Debug, Clone)]
pub struct PrepareArgs {
    pub lambda: f64,
    pub scale_hint: Option<f64>,
}

impl Default for PrepareArgs {
    fn default() -> Self {
        PrepareArgs { lambda: DEFAULT_LAMBDA, scale_hint: None }
    }
}

/// Smooth the metric depth against the reference depth, optionally rescale,
/// and write the consistent depth plus scene statistics under `prepared/`.
pub fn prepare(dir: &Path, args: &PrepareArgs) -> anyhow::Result<Value> {
    let bundle = input(SceneBundle::load(dir), &format!("loading {}", dir.display()))?;
    let smoothed = input(depth::temporal_smooth(&bundle.depth, &bundle.depth_ref, args.lambda), "smoothing depth")?;
    let depth = match args.scale_hint {
        Some(h) => input(depth::rescale_depth(&smoothed, h), "rescaling depth")?,
        None => smoothed,
    };
    let ann = input(SceneAnnotations::build(&bundle, depth.clone(), &AnnotationConfig::default()), "annotating scene")?;
    let s = &ann.stats;
    let bucket = qagen::scale_bucket(&qagen::BucketInput::from_stats(s, ann.indoor, &ann.source))
        .map(|b| b.as_str().to_string())
        .unwrap_or_else(|e| format!("unbucketed: {e}"));
    let stats = json!({
        "scene_id": ann.scene_id,
        "frames": bundle.frames(),
        "lambda": args.lambda,
        "scale_hint": args.scale_hint,
        "p95_depth": s.p95_depth,
        "median_depth": s.median_depth,
        "valid_depth_count": s.valid_depth_count,
        "max_object_extent": s.max_object_extent,
        "camera_height": s.camera_height,
        "scale_bucket": bucket,
    });
    scene::write_prepared(dir, &depth, &stats).with_context(|| format!("writing prepared files for {}", dir.display()))?;
    Ok(stats)
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub qa: QaConfig,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub scene_id: String,
    pub records: Vec<QaRecord>,
    pub skipped: Vec<Skip>,
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| fail(EXIT_INPUT, "input", format!("bad {what} {x:?}: {e}"))))
        .collect()
}

pub fn parse_tasks(s: &str) -> anyhow::Result<Vec<Task>> {
    if s.trim() == "all" {
        return Ok(Task::ALL.to_vec());
    }
    parse_list(s, "task")
}

pub fn parse_modes(s: &str) -> anyhow::Result<Vec<AnswerMode>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| AnswerMode::parse(x).ok_or_else(|| fail(EXIT_INPUT, "input", format!("bad answer mode {x:?}"))))
        .collect()
}

pub fn parse_referring(s: &str) -> anyhow::Result<Option<ReferringKind>> {
    match s.trim() {
        "" | "none" => Ok(None),
        other => input(other.parse::<ReferringKind>(), "referring mode").map(Some),
    }
}

/// Generate QA records for a prepared scene and write `qa.jsonl` and the
/// per-task skip log next to it.
pub fn generate(dir: &Path, args: &GenerateArgs) -> anyhow::Result<Generated> {
    let bundle = input(SceneBundle::load(dir), &format!("loading {}", dir.display()))?;
    let depth = input(bundle.load_prepared_depth(), "prepared depth")?;
    let ann = input(SceneAnnotations::build(&bundle, depth, &AnnotationConfig::default()), "annotating scene")?;
    let out = qagen::build_qa(&ann, &args.qa, TemplateSet::builtin());
    for r in &out.records {
        r.validate().with_context(|| format!("generated an invalid record in {}", dir.display()))?;
    }
    formats::write_jsonl(&dir.join(QA_FILE), &out.records)?;
    formats::write_jsonl(&dir.join(SKIP_FILE), &out.skipped)?;
    Ok(Generated { scene_id: ann.scene_id, records: out.records, skipped: out.skipped })
}

// ---------------------------------------------------------------- reward

#[derive(Debug, Clone, Copy)]
pub struct RewardArgs {
    pub epsilon: f64,
    pub beta: f64,
}

impl Default for RewardArgs {
    fn default() -> Self {
        RewardArgs { epsilon: 0.2, beta: 0.04 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardRow {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(flatten)]
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvantageRow {
    pub group: String,
    pub ids: Vec<String>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub epsilon: f64,
    pub beta: f64,
    /// Clipped surrogate when every member carries `logp` and `logp_old`
    /// (sequence log-probabilities under the new and old policies).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<f64>,
}

fn load_rows<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    input(formats::read_jsonl(path), &format!("reading {}", path.display()))
}

fn by_id(records: &[QaRecord]) -> BTreeMap<&str, &QaRecord> {
    records.iter().map(|r| (r.id.as_str(), r)).collect()
}

fn check_alignment(records: &[QaRecord], predictions: &[Prediction]) -> anyhow::Result<()> {
    let ids = by_id(records);
    if let Some(p) = predictions.iter().find(|p| !ids.contains_key(p.id.as_str())) {
        return Err(fail(EXIT_ALIGN, "alignment", format!("prediction id {:?} has no QA record", p.id)));
    }
    Ok(())
}

/// Clipped surrogate `mean_i min(rho_i A_i, clip(rho_i) A_i)`.
pub fn clipped_surrogate(logp: &[f64], logp_old: &[f64], adv: &[f64], epsilon: f64) -> f64 {
    let n = adv.len() as f64;
    logp.iter()
        .zip(logp_old)
        .zip(adv)
        .map(|((lp, lo), a)| {
            let rho = (lp - lo).exp();
            (rho * a).min(rho.clamp(1.0 - epsilon, 1.0 + epsilon) * a)
        })
        .sum::<f64>()
        / n
}

pub fn reward(qa: &Path, predictions: &Path, out_dir: &Path, args: &RewardArgs) -> anyhow::Result<(Vec<RewardRow>, Vec<AdvantageRow>)> {
    if !(args.epsilon > 0.0 && args.epsilon < 1.0) || !(args.beta >= 0.0) || !args.beta.is_finite() {
        return Err(fail(EXIT_INPUT, "input", format!("need 0 < epsilon < 1 and beta >= 0, got {} and {}", args.epsilon, args.beta)));
    }
    let records: Vec<QaRecord> = load_rows(qa)?;
    let preds: Vec<Prediction> = load_rows(predictions)?;
    check_alignment(&records, &preds)?;
    let ids = by_id(&records);
    let embedder = HashedBagOfWords::default();
    let rows: Vec<RewardRow> = preds
        .iter()
        .map(|p| {
            let r = ids[p.id.as_str()];
            let target = r.target();
            let gt = RewardTarget {
                target: &target,
                semantic: r.anchors.semantic.as_deref(),
                scale: r.anchors.scale,
                required: RequiredAnchors { scale: r.anchors.scale.is_some(), semantic: r.anchors.semantic.is_some() },
            };
            RewardRow { id: p.id.clone(), group: p.group.clone(), reward: rewards::score_response(&p.response, &gt, &embedder) }
        })
        .collect();

    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        if let Some(g) = &p.group {
            match groups.iter_mut().find(|(name, _)| name == g) {
                Some((_, members)) => members.push(i),
                None => groups.push((g.clone(), vec![i])),
            }
        }
    }
    let mut adv_rows = Vec::new();
    for (group, members) in groups {
        let rs: Vec<f64> = members.iter().map(|&i| rows[i].reward.r_bar).collect();
        let advantages = input(rewards::grpo_advantages(&rs), &format!("group {group:?}"))?;
        let field = |i: usize, k: &str| preds[i].extra.get(k).and_then(Value::as_f64);
        let logp: Option<Vec<f64>> = members.iter().map(|&i| field(i, "logp")).collect();
        let logp_old: Option<Vec<f64>> = members.iter().map(|&i| field(i, "logp_old")).collect();
        let surrogate = logp.zip(logp_old).map(|(a, b)| clipped_surrogate(&a, &b, &advantages, args.epsilon));
        adv_rows.push(AdvantageRow {
            group,
            ids: members.iter().map(|&i| preds[i].id.clone()).collect(),
            rewards: rs,
            advantages,
            epsilon: args.epsilon,
            beta: args.beta,
            surrogate,
        });
    }
    formats::write_jsonl(&out_dir.join(REWARDS_FILE), &rows)?;
    if !adv_rows.is_empty() {
        formats::write_jsonl(&out_dir.join(ADVANTAGES_FILE), &adv_rows)?;
    }
    Ok((rows, adv_rows))
}

// ---------------------------------------------------------------- score

pub fn score(qa: &Path, predictions: &Path, out: &Path, weighting: Weighting) -> anyhow::Result<ScoreReport> {
    let records: Vec<QaRecord> = load_rows(qa)?;
    let preds: Vec<Prediction> = load_rows(predictions)?;
    check_alignment(&records, &preds)?;
    let items = eval::score_predictions(&records, &preds).map_err(|e| fail(EXIT_ALIGN, "alignment", e.to_string()))?;
    let report = input(eval::aggregate(&items, weighting), "aggregating")?;
    formats::write_bytes(out, report.to_json().as_bytes())?;
    Ok(report)
}

// ---------------------------------------------------------------- demo-fusion

pub fn demo_fusion(cfg: &CheckConfig) -> anyhow::Result<Vec<CheckOutcome>> {
    input(fusion::run_checks(cfg), "fusion check configuration")
}

// ---------------------------------------------------------------- synth

pub const SYNTH_SCENES: [&str; 2] = ["indoor_room", "tabletop"];

pub fn synth(kind: &str, out: &Path) -> anyhow::Result<PathBuf> {
    let scene = match kind {
        "indoor_room" => synth::indoor_room(),
        "tabletop" => synth::tabletop(),
        other => return Err(fail(EXIT_INPUT, "input", format!("unknown synthetic scene {other:?}; known: {SYNTH_SCENES:?}"))),
    };
    scene.write(out)?;
    Ok(out.to_path_buf())
}
