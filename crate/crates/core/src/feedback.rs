//! Human feedback as search-space restrictions.
//!
//! Two parsers produce the same [`FeedbackDirective`]: a deterministic
//! phrasebook grammar, and an optional language-model path that must answer
//! with a small JSON schema. Directives can only narrow the catalog.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::actions::{ActionKind, ParamRange};
use crate::optimize::{OptimizerConfig, SearchSpace, SpaceEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Grammar,
    Llm,
}

/// Per-parameter bounds for one kind, in catalog parameter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeOverride {
    pub kind: ActionKind,
    pub bounds: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackDirective {
    pub raw_text: String,
    pub parsed: Vec<RangeOverride>,
    pub provenance: Provenance,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "type", content = "detail", rename_all = "snake_case")]
pub enum FeedbackError {
    #[error("feedback rejected: {reason}")]
    Rejected {
        reason: String,
        /// Closest phrasebook template, for unrecognized text.
        hint: Option<String>,
        /// Last model response, for audit.
        raw_response: Option<String>,
    },
    #[error("language model unreachable: {0}")]
    Transport(String),
}

impl FeedbackError {
    fn rejected(reason: impl Into<String>) -> Self {
        FeedbackError::Rejected {
            reason: reason.into(),
            hint: None,
            raw_response: None,
        }
    }
}

impl From<FeedbackError> for crate::Error {
    fn from(e: FeedbackError) -> Self {
        crate::Error::Validation(e.to_string())
    }
}

pub type FeedbackResult<T> = std::result::Result<T, FeedbackError>;

/// Phrasebook templates, also used for hints.
pub const TEMPLATES: [&str; 7] = [
    "increase values above quantile 80 by 5% to 10%",
    "decrease values below quantile 20 by 5%",
    "increase the amplitude by 2% to 4%",
    "increase the minimum by 5%",
    "increase the trend by 1%",
    "decrease the level by 2%",
    "shift by 2 steps",
];

static CHANGE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^(?P<dir>increase|decrease|raise|lower)\s+(?:the\s+)?(?P<target>values\s+(?P<side>above|below)\s+(?:the\s+)?quantile\s+(?P<q>[-+]?\d+(?:\.\d+)?)|amplitude|minimum|trend|slope|level|intercept)\s+by\s+(?P<x>[-+]?\d+(?:\.\d+)?)\s*%(?:\s+to\s+(?P<y>[-+]?\d+(?:\.\d+)?)\s*%)?$",
    )
    .expect("valid pattern")
});

static SHIFT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^shift\s+(?:it\s+|the\s+forecast\s+)?by\s+(?P<n>[-+]?\d+)\s+steps?$").expect("valid pattern")
});

static SPLIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s*(?:,\s*)?\band\b\s*").expect("valid pattern"));

fn nearest_template(text: &str) -> String {
    TEMPLATES
        .iter()
        .map(|t| (strsim::normalized_levenshtein(text, t), *t))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, t)| t.to_string())
        .expect("templates are non-empty")
}

fn catalog_bounds(kind: ActionKind) -> Vec<(f64, f64)> {
    kind.params().iter().map(|r| (r.low, r.high)).collect()
}

/// Clamps a requested range into the catalog. Ranges that do not overlap
/// the catalog are rejected.
fn clamp_range(kind: ActionKind, r: &ParamRange, lo: f64, hi: f64, warnings: &mut Vec<String>) -> FeedbackResult<(f64, f64)> {
    if hi < r.low || lo > r.high {
        return Err(FeedbackError::rejected(format!(
            "{kind}.{} range [{lo}, {hi}] lies outside the allowed [{}, {}]",
            r.name, r.low, r.high
        )));
    }
    let (clo, chi) = (lo.max(r.low), hi.min(r.high));
    if (clo, chi) != (lo, hi) {
        warnings.push(format!(
            "{kind}.{} range [{lo}, {hi}] clamped to [{clo}, {chi}]",
            r.name
        ));
    }
    Ok((clo, chi))
}

fn number(s: &str) -> f64 {
    s.parse().expect("regex admits only numbers")
}

fn parse_clause(clause: &str, warnings: &mut Vec<String>) -> FeedbackResult<RangeOverride> {
    if let Some(c) = SHIFT.captures(clause) {
        let n = number(&c["n"]);
        let r = ActionKind::ShiftSeries.params()[0];
        if !r.contains(n) {
            return Err(FeedbackError::rejected(format!(
                "shift of {n} steps must be strictly between {} and {}",
                r.low, r.high
            )));
        }
        return Ok(RangeOverride {
            kind: ActionKind::ShiftSeries,
            bounds: vec![(n, n)],
        });
    }
    let Some(c) = CHANGE.captures(clause) else {
        return Err(FeedbackError::Rejected {
            reason: format!("unrecognized feedback {clause:?}"),
            hint: Some(nearest_template(clause)),
            raw_response: None,
        });
    };
    let sign = if matches!(&c["dir"], "decrease" | "lower") { -1.0 } else { 1.0 };
    let x = number(&c["x"]);
    let y = c.name("y").map_or(x, |m| number(m.as_str()));
    let (lo, hi) = {
        let (a, b) = (sign * x, sign * y);
        (a.min(b), a.max(b))
    };
    let target = c["target"].to_string();
    let kind = if let Some(side) = c.name("side") {
        if side.as_str() == "above" {
            ActionKind::PiecewiseScaleHigh
        } else {
            ActionKind::PiecewiseScaleLow
        }
    } else {
        match target.as_str() {
            "amplitude" => ActionKind::ScaleAmplitude,
            "minimum" => ActionKind::IncreaseMinimumFactor,
            "trend" | "slope" => ActionKind::LinearTrendSlope,
            _ => ActionKind::LinearTrendIntercept,
        }
    };
    let ranges = kind.params();
    let mut bounds = Vec::with_capacity(ranges.len());
    if let Some(q) = c.name("q") {
        let q = number(q.as_str());
        if !(q > 0.0 && q < 100.0) {
            return Err(FeedbackError::rejected(format!("quantile {q} must be strictly between 0 and 100")));
        }
        let r = ranges[0];
        if !r.contains(q) {
            return Err(FeedbackError::rejected(format!(
                "{kind} needs a quantile in [{}, {}], got {q}",
                r.low, r.high
            )));
        }
        bounds.push((q, q));
    }
    let factor = ranges.last().expect("scaling kinds have a factor");
    bounds.push(clamp_range(kind, factor, lo, hi, warnings)?);
    Ok(RangeOverride { kind, bounds })
}

/// Parses phrasebook feedback such as
/// `increase values above quantile 80 by 10% to 50%`.
///
/// Clauses may be joined with "and". Out-of-catalog percentages are
/// clamped with a warning.
pub fn parse_grammar(text: &str) -> FeedbackResult<FeedbackDirective> {
    let normalized = text.trim().to_lowercase();
    let normalized = normalized.trim_end_matches(['.', '!']).trim();
    if normalized.is_empty() {
        return Err(FeedbackError::rejected("feedback text is empty"));
    }
    let mut warnings = Vec::new();
    let parsed = SPLIT
        .split(normalized)
        .filter(|c| !c.is_empty())
        .map(|c| parse_clause(c.trim(), &mut warnings))
        .collect::<FeedbackResult<Vec<_>>>()?;
    let directive = FeedbackDirective {
        raw_text: text.to_string(),
        parsed,
        provenance: Provenance::Grammar,
        warnings,
    };
    validate_directive(&directive)?;
    Ok(directive)
}

/// Every override must name its kind's parameters with ordered bounds
/// inside the catalog.
pub fn validate_directive(d: &FeedbackDirective) -> FeedbackResult<()> {
    if d.parsed.is_empty() {
        return Err(FeedbackError::rejected("directive contains no actions"));
    }
    for o in &d.parsed {
        let ranges = o.kind.params();
        if o.bounds.len() != ranges.len() {
            return Err(FeedbackError::rejected(format!(
                "{} takes {} parameter(s), got {}",
                o.kind,
                ranges.len(),
                o.bounds.len()
            )));
        }
        for (r, &(lo, hi)) in ranges.iter().zip(&o.bounds) {
            if !(lo <= hi) || lo < r.low || hi > r.high {
                return Err(FeedbackError::rejected(format!(
                    "{}.{} range [{lo}, {hi}] exceeds the catalog range [{}, {}]",
                    o.kind, r.name, r.low, r.high
                )));
            }
            if r.integer_valued && !(r.contains(lo.ceil()) || r.contains(hi.floor())) {
                return Err(FeedbackError::rejected(format!("{}.{} admits no integer", o.kind, r.name)));
            }
        }
    }
    Ok(())
}

/// Restricts the search space to the directive's kinds and ranges.
///
/// An empty directive leaves the configuration unchanged. The empty plan is
/// always evaluated first by every strategy, so no restriction can force a
/// regression.
pub fn inject(directive: &FeedbackDirective, cfg: &OptimizerConfig) -> OptimizerConfig {
    if directive.parsed.is_empty() {
        return cfg.clone();
    }
    let mut entries: Vec<SpaceEntry> = Vec::new();
    for o in &directive.parsed {
        match entries.iter_mut().find(|e| e.kind == o.kind) {
            Some(e) => {
                for (b, &(lo, hi)) in e.bounds.iter_mut().zip(&o.bounds) {
                    *b = (b.0.min(lo), b.1.max(hi));
                }
            }
            None => entries.push(SpaceEntry {
                kind: o.kind,
                bounds: o.bounds.clone(),
            }),
        }
    }
    entries.sort_by_key(|e| e.kind);
    OptimizerConfig {
        space: SearchSpace { entries },
        ..cfg.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    /// Absent disables the language-model path.
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "qwen2-72b-32k".into(),
            timeout_secs: 30,
            max_retries: 2,
        }
    }
}

/// One completion request. Implementations return the model's text or a
/// transport failure description.
pub trait LlmTransport {
    fn complete(&self, cfg: &LlmConfig, system: &str, user: &str) -> std::result::Result<String, String>;
}

pub const SYSTEM_PROMPT: &str = r#"You translate feedback about a time-series forecast into forecast corrections.
Answer with JSON only, no prose and no code. The schema is
{"actions": [{"kind": KIND, "params": PARAMS}, ...]}
where KIND is one of LinearTrendSlope, LinearTrendIntercept, PiecewiseScaleHigh,
PiecewiseScaleLow, SwapSeries, ShiftSeries, ScaleAmplitude, AddNoise, IncreaseMinimumFactor.
PARAMS maps each parameter name to a number, or NAME_low and NAME_high to a range.
Parameters and allowed values:
LinearTrendSlope s in [-5, 5]; LinearTrendIntercept b in [-5, 5];
PiecewiseScaleHigh delta in [70, 100], f in [-1, 10]; PiecewiseScaleLow delta in [0, 30], f in [-1, 10];
SwapSeries none; ShiftSeries shift integer in (-200, 200); ScaleAmplitude f in [-5, 5];
AddNoise sigma in [10, 30]; IncreaseMinimumFactor f in [-1, 10].
Percentages are given as numbers, so "increase by 5%" is f = 5.
A single action may also be returned as {"kind": KIND, "params": PARAMS}."#;

fn extract_json(text: &str) -> Option<Value> {
    let t = text.trim();
    if let Ok(v) = serde_json::from_str(t) {
        return Some(v);
    }
    let start = t.find(['{', '['])?;
    let end = t.rfind(['}', ']'])?;
    (end > start).then(|| serde_json::from_str(&t[start..=end]).ok()).flatten()
}

fn param_value(params: &serde_json::Map<String, Value>, key: &str) -> Result<Option<f64>, String> {
    match params.get(key) {
        None => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| format!("parameter {key} is not a number")),
    }
}

fn override_from_json(v: &Value) -> Result<RangeOverride, String> {
    let obj = v.as_object().ok_or("action is not an object")?;
    let kind: ActionKind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or("action has no kind")?
        .parse()
        .map_err(|e: crate::Error| e.to_string())?;
    let empty = serde_json::Map::new();
    let params = match obj.get("params") {
        None | Some(Value::Null) => &empty,
        Some(Value::Object(m)) => m,
        Some(_) => return Err("params is not an object".into()),
    };
    let ranges = kind.params();
    for key in params.keys() {
        let base = key.strip_suffix("_low").or_else(|| key.strip_suffix("_high")).unwrap_or(key);
        if !ranges.iter().any(|r| r.name == base) {
            return Err(format!("{kind} has no parameter {key}"));
        }
    }
    let mut bounds = Vec::with_capacity(ranges.len());
    for r in ranges {
        let exact = param_value(params, r.name)?;
        let low = param_value(params, &format!("{}_low", r.name))?;
        let high = param_value(params, &format!("{}_high", r.name))?;
        let (lo, hi) = match (exact, low, high) {
            (Some(x), None, None) => (x, x),
            (None, lo, hi) => (lo.unwrap_or(r.low), hi.unwrap_or(r.high)),
            _ => return Err(format!("{kind}.{} given both as a value and a range", r.name)),
        };
        if !(lo <= hi) {
            return Err(format!("{kind}.{} range [{lo}, {hi}] is reversed", r.name));
        }
        if lo < r.low || hi > r.high {
            return Err(format!(
                "{kind}.{} range [{lo}, {hi}] exceeds the catalog range [{}, {}]",
                r.name, r.low, r.high
            ));
        }
        bounds.push((lo, hi));
    }
    Ok(RangeOverride { kind, bounds })
}

fn directive_from_response(text: &str, raw_text: &str) -> Result<FeedbackDirective, String> {
    let v = extract_json(text).ok_or("response is not JSON")?;
    let items: Vec<&Value> = match &v {
        Value::Array(a) => a.iter().collect(),
        Value::Object(o) if o.contains_key("actions") => o["actions"].as_array().ok_or("actions is not a list")?.iter().collect(),
        Value::Object(_) => vec![&v],
        _ => return Err("response is not an object or list".into()),
    };
    let parsed = items.into_iter().map(override_from_json).collect::<Result<Vec<_>, _>>()?;
    let d = FeedbackDirective {
        raw_text: raw_text.to_string(),
        parsed,
        provenance: Provenance::Llm,
        warnings: Vec::new(),
    };
    validate_directive(&d).map_err(|e| e.to_string())?;
    Ok(d)
}

/// Free-form feedback through a language model.
///
/// Responses are validated strictly (no clamping); invalid responses are
/// retried up to `max_retries` times. Transport failures end the attempt
/// immediately.
pub fn parse_llm(text: &str, cfg: &LlmConfig, transport: &dyn LlmTransport) -> FeedbackResult<FeedbackDirective> {
    if cfg.endpoint.is_none() {
        return Err(FeedbackError::rejected("no language-model endpoint is configured"));
    }
    if text.trim().is_empty() {
        return Err(FeedbackError::rejected("feedback text is empty"));
    }
    let mut last = (String::new(), String::new());
    for _ in 0..=cfg.max_retries {
        let response = transport.complete(cfg, SYSTEM_PROMPT, text).map_err(FeedbackError::Transport)?;
        match directive_from_response(&response, text) {
            Ok(d) => return Ok(d),
            Err(reason) => last = (reason, response),
        }
    }
    Err(FeedbackError::Rejected {
        reason: format!("invalid model response after {} attempt(s): {}", cfg.max_retries + 1, last.0),
        hint: None,
        raw_response: Some(last.1),
    })
}

impl fmt::Display for FeedbackDirective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .parsed
            .iter()
            .map(|o| {
                let ps: Vec<String> = o
                    .kind
                    .params()
                    .iter()
                    .zip(&o.bounds)
                    .map(|(r, (lo, hi))| if lo == hi { format!("{}={lo}", r.name) } else { format!("{}∈[{lo}, {hi}]", r.name) })
                    .collect();
                format!("{}({})", o.kind, ps.join(", "))
            })
            .collect();
        f.write_str(&parts.join(" + "))
    }
}

/// Full catalog override for `kind`, useful for hand-built directives.
pub fn catalog_override(kind: ActionKind) -> RangeOverride {
    RangeOverride {
        kind,
        bounds: catalog_bounds(kind),
    }
}
