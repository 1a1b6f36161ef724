//! Deterministic evaluation: classify the question, normalize the model's
//! free-form answer to a canonical value, and score per category.
//!
//! All extraction is rule-based and versioned; an answer that defeats the
//! rules is counted as wrong, never dropped. RMSE terms are sorted before
//! summation so reports are permutation-invariant bit for bit.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ConversationSample, QuestionType, Role};
use crate::model::Model;
use crate::ModelError;

/// Bump when any classification or extraction rule changes.
pub const RULES_VERSION: &str = "rules-v1";

/// Relative tolerance for distance correctness.
pub const DISTANCE_TOL: f64 = 0.25;
/// Denominator floor guarding against zero gold distances.
pub const DISTANCE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("question matches no category rule: {0:?}")]
    UnclassifiableQuestion(String),
    #[error("no {qtype:?} value extractable from {text:?}")]
    ExtractionFailure { text: String, qtype: QuestionType },
    #[error("{qtype:?} sample carries a {got} value")]
    VariantMismatch { qtype: QuestionType, got: &'static str },
    #[error("sample {sample_id} has no usable gold answer: {reason}")]
    BadGold { sample_id: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum NormalizedAnswer {
    Direction(Direction),
    Count(u64),
    /// Meters.
    Distance(f64),
    Choice(usize),
}

impl NormalizedAnswer {
    fn variant_name(&self) -> &'static str {
        match self {
            NormalizedAnswer::Direction(_) => "direction",
            NormalizedAnswer::Count(_) => "count",
            NormalizedAnswer::Distance(_) => "distance",
            NormalizedAnswer::Choice(_) => "choice",
        }
    }
}

/// Lexical shape of a raw answer string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerShape {
    Directional,
    Numeric,
    Choice,
    Sentence,
}

static DIRECTION_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(left|right)\b").expect("static pattern"));
static INTEGER_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(\d+|zero|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve|thirteen|fourteen|fifteen|sixteen|seventeen|eighteen|nineteen|twenty)\b",
    )
    .expect("static pattern")
});
static DECIMAL_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\d+(?:\.\d+)?").expect("static pattern"));
static CHOICE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)region\s+(\d+)").expect("static pattern"));
static BARE_NUMBER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\d+(?:\.\d+)?\.?$").expect("static pattern"));
static BARE_CHOICE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\[?region\s+\d+\]?\.?$").expect("static pattern"));

/// First-match rule cascade; order is part of the contract.
pub fn classify_question(text: &str) -> Result<QuestionType, EvalError> {
    let lower = text.to_lowercase();
    if lower.contains("which") && lower.contains("region") {
        return Ok(QuestionType::MultiChoice);
    }
    if DIRECTION_RE.is_match(&lower) {
        return Ok(QuestionType::LeftRight);
    }
    if lower.contains("how many") {
        return Ok(QuestionType::Count);
    }
    if lower.contains("distance") || lower.contains("how far") {
        return Ok(QuestionType::Distance);
    }
    Err(EvalError::UnclassifiableQuestion(text.to_string()))
}

/// Shape detection over the raw answer; `Sentence` is the fallback.
pub fn classify_answer(text: &str) -> AnswerShape {
    let t = text.trim();
    let lower = t.to_lowercase();
    let bare = lower.trim_end_matches('.');
    if bare == "left" || bare == "right" {
        return AnswerShape::Directional;
    }
    if BARE_NUMBER_RE.is_match(t) {
        return AnswerShape::Numeric;
    }
    if BARE_CHOICE_RE.is_match(t) {
        return AnswerShape::Choice;
    }
    AnswerShape::Sentence
}

fn number_word(word: &str) -> Option<u64> {
    const WORDS: [&str; 21] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
        "nineteen", "twenty",
    ];
    WORDS.iter().position(|w| *w == word).map(|i| i as u64)
}

fn fail(text: &str, qtype: QuestionType) -> EvalError {
    EvalError::ExtractionFailure { text: text.to_string(), qtype }
}

/// Extracts the canonical value for a known question type.
pub fn normalize_answer(text: &str, qtype: QuestionType) -> Result<NormalizedAnswer, EvalError> {
    match qtype {
        QuestionType::LeftRight => {
            // subject-first phrasing puts the operative word last
            let last = DIRECTION_RE
                .find_iter(text)
                .last()
                .ok_or_else(|| fail(text, qtype))?;
            let dir = if last.as_str().eq_ignore_ascii_case("left") {
                Direction::Left
            } else {
                Direction::Right
            };
            Ok(NormalizedAnswer::Direction(dir))
        }
        QuestionType::Count => {
            let m = INTEGER_RE.find(text).ok_or_else(|| fail(text, qtype))?;
            let token = m.as_str().to_lowercase();
            let value = if token.chars().all(|c| c.is_ascii_digit()) {
                token.parse::<u64>().map_err(|_| fail(text, qtype))?
            } else {
                number_word(&token).ok_or_else(|| fail(text, qtype))?
            };
            Ok(NormalizedAnswer::Count(value))
        }
        QuestionType::Distance => {
            let m = DECIMAL_RE.find(text).ok_or_else(|| fail(text, qtype))?;
            let value: f64 = m.as_str().parse().map_err(|_| fail(text, qtype))?;
            let unit: String = text[m.end()..]
                .trim_start()
                .chars()
                .take_while(|c| c.is_alphabetic())
                .collect::<String>()
                .to_lowercase();
            let meters = match unit.as_str() {
                "cm" | "centimeter" | "centimeters" => value / 100.0,
                _ => value,
            };
            Ok(NormalizedAnswer::Distance(meters))
        }
        QuestionType::MultiChoice => {
            let c = CHOICE_RE.captures(text).ok_or_else(|| fail(text, qtype))?;
            let idx: usize = c[1].parse().map_err(|_| fail(text, qtype))?;
            Ok(NormalizedAnswer::Choice(idx))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    /// Samples of this category, parseable or not.
    pub n_total: usize,
    /// Samples whose prediction survived extraction.
    pub n_parsed: usize,
    pub n_correct: usize,
    /// Correct over all samples; failed extractions count as wrong.
    pub accuracy: f64,
    /// Over parsed predictions; Count and Distance only.
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rules_version: String,
    pub total: usize,
    pub unparseable: usize,
    pub per_category: BTreeMap<QuestionType, CategoryMetrics>,
    /// Unweighted mean of present-category accuracies, scaled to [0, 100].
    pub aggregate: f64,
}

fn check_variant(
    qtype: QuestionType,
    value: &NormalizedAnswer,
) -> Result<(), EvalError> {
    let ok = matches!(
        (qtype, value),
        (QuestionType::LeftRight, NormalizedAnswer::Direction(_))
            | (QuestionType::Count, NormalizedAnswer::Count(_))
            | (QuestionType::Distance, NormalizedAnswer::Distance(_))
            | (QuestionType::MultiChoice, NormalizedAnswer::Choice(_))
    );
    if ok {
        Ok(())
    } else {
        Err(EvalError::VariantMismatch { qtype, got: value.variant_name() })
    }
}

/// Correctness rule per category.
pub fn is_correct(
    qtype: QuestionType,
    pred: &NormalizedAnswer,
    gold: &NormalizedAnswer,
) -> Result<bool, EvalError> {
    check_variant(qtype, pred)?;
    check_variant(qtype, gold)?;
    Ok(match (pred, gold) {
        (NormalizedAnswer::Direction(p), NormalizedAnswer::Direction(g)) => p == g,
        (NormalizedAnswer::Count(p), NormalizedAnswer::Count(g)) => p == g,
        (NormalizedAnswer::Distance(p), NormalizedAnswer::Distance(g)) => {
            (p - g).abs() / g.max(DISTANCE_EPS) <= DISTANCE_TOL
        }
        (NormalizedAnswer::Choice(p), NormalizedAnswer::Choice(g)) => p == g,
        _ => unreachable!("variants checked above"),
    })
}

/// Scores `(qtype, prediction-or-failure, gold)` triples.
pub fn compute_metrics(
    pairs: &[(QuestionType, Option<NormalizedAnswer>, NormalizedAnswer)],
) -> Result<MetricsReport, EvalError> {
    struct Acc {
        n_total: usize,
        n_parsed: usize,
        n_correct: usize,
        sq_errors: Vec<f64>,
    }
    let mut acc: BTreeMap<QuestionType, Acc> = BTreeMap::new();
    let mut unparseable = 0usize;
    for (qtype, pred, gold) in pairs {
        check_variant(*qtype, gold)?;
        let a = acc.entry(*qtype).or_insert(Acc {
            n_total: 0,
            n_parsed: 0,
            n_correct: 0,
            sq_errors: Vec::new(),
        });
        a.n_total += 1;
        match pred {
            None => unparseable += 1,
            Some(p) => {
                a.n_parsed += 1;
                if is_correct(*qtype, p, gold)? {
                    a.n_correct += 1;
                }
                match (p, gold) {
                    (NormalizedAnswer::Count(pv), NormalizedAnswer::Count(gv)) => {
                        let d = *pv as f64 - *gv as f64;
                        a.sq_errors.push(d * d);
                    }
                    (NormalizedAnswer::Distance(pv), NormalizedAnswer::Distance(gv)) => {
                        let d = pv - gv;
                        a.sq_errors.push(d * d);
                    }
                    _ => {}
                }
            }
        }
    }
    let mut per_category = BTreeMap::new();
    let mut accuracy_sum = 0.0;
    let mut n_categories = 0usize;
    for (qtype, mut a) in acc {
        let accuracy = a.n_correct as f64 / a.n_total as f64;
        let rmse = if matches!(qtype, QuestionType::Count | QuestionType::Distance)
            && !a.sq_errors.is_empty()
        {
            // order-independent sum, so shuffled inputs reproduce the bits
            a.sq_errors.sort_by(f64::total_cmp);
            let sum: f64 = a.sq_errors.iter().sum();
            Some((sum / a.sq_errors.len() as f64).sqrt())
        } else {
            None
        };
        accuracy_sum += accuracy;
        n_categories += 1;
        per_category.insert(
            qtype,
            CategoryMetrics {
                n_total: a.n_total,
                n_parsed: a.n_parsed,
                n_correct: a.n_correct,
                accuracy,
                rmse,
            },
        );
    }
    let aggregate = if n_categories == 0 {
        0.0
    } else {
        accuracy_sum / n_categories as f64 * 100.0
    };
    Ok(MetricsReport {
        rules_version: RULES_VERSION.to_string(),
        total: pairs.len(),
        unparseable,
        per_category,
        aggregate,
    })
}

/// One evaluated sample, as written to the trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub qtype: QuestionType,
    /// Raw model generation.
    pub raw: String,
    pub shape: AnswerShape,
    /// `None` when extraction failed.
    pub extracted: Option<NormalizedAnswer>,
    pub gold: NormalizedAnswer,
    pub verdict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_new_tokens: 48 }
    }
}

/// Generates, normalizes, and scores every sample; the trace holds one
/// record per sample in dataset order.
pub fn evaluate_model(
    model: &Model,
    samples: &[ConversationSample],
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<TraceRecord>), EvalError> {
    let mut trace = Vec::with_capacity(samples.len());
    let mut pairs = Vec::with_capacity(samples.len());
    for sample in samples {
        let (qtype, gold) = gold_of(sample)?;
        let raw = model.generate_answer(sample, cfg.max_new_tokens)?;
        let shape = classify_answer(&raw);
        let extracted = normalize_answer(&raw, qtype).ok();
        let verdict = match &extracted {
            Some(p) => is_correct(qtype, p, &gold)?,
            None => false,
        };
        pairs.push((qtype, extracted, gold));
        trace.push(TraceRecord {
            id: sample.sample_id.clone(),
            qtype,
            raw,
            shape,
            extracted,
            gold,
            verdict,
        });
    }
    let report = compute_metrics(&pairs)?;
    Ok((report, trace))
}

/// Rebuilds the metrics report from a trace; byte-identical to the live
/// report for the same samples.
pub fn metrics_from_trace(trace: &[TraceRecord]) -> Result<MetricsReport, EvalError> {
    let pairs: Vec<_> = trace.iter().map(|t| (t.qtype, t.extracted, t.gold)).collect();
    compute_metrics(&pairs)
}

/// Question type and normalized gold answer for a dataset sample.
pub fn gold_of(sample: &ConversationSample) -> Result<(QuestionType, NormalizedAnswer), EvalError> {
    let gold_text = match sample.turns.last() {
        Some(t) if t.role == Role::Assistant => &t.text,
        _ => {
            return Err(EvalError::BadGold {
                sample_id: sample.sample_id.clone(),
                reason: "conversation does not end with an assistant turn".into(),
            })
        }
    };
    let question = sample
        .turns
        .iter()
        .rev()
        .find(|t| t.role == Role::User)
        .map(|t| t.text.as_str())
        .unwrap_or_default();
    let qtype = match sample.category {
        Some(c) => c,
        None => classify_question(question)?,
    };
    let gold = normalize_answer(gold_text, qtype).map_err(|e| EvalError::BadGold {
        sample_id: sample.sample_id.clone(),
        reason: e.to_string(),
    })?;
    Ok((qtype, gold))
}

/// Human-readable report with the category table and aggregate.
pub fn render_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "evaluation report ({})\naggregate: unweighted category mean, local convention; \
         not comparable to external leaderboards\n\n",
        report.rules_version
    ));
    out.push_str("category     n_total  n_parsed  n_correct  accuracy  rmse\n");
    for (qtype, m) in &report.per_category {
        let rmse = m.rmse.map_or("-".to_string(), |r| format!("{r:.4}"));
        out.push_str(&format!(
            "{:<12} {:>7}  {:>8}  {:>9}  {:>8.4}  {rmse}\n",
            qtype.as_str(),
            m.n_total,
            m.n_parsed,
            m.n_correct,
            m.accuracy,
        ));
    }
    out.push_str(&format!(
        "\ntotal: {}  unparseable: {}\naggregate score: {:.4}\n",
        report.total, report.unparseable, report.aggregate
    ));
    out
}
