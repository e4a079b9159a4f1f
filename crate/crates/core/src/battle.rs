//! Stage-sliced pairwise battles.
//!
//! Two transcripts are cut into per-phase slices, interleaved so that each
//! side leads every other stage, rendered into the judge prompt and judged
//! on all twelve dimensions at once. Diversity is decided locally from
//! Distinct-N instead of by the judge.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{BackendError, ChatBackend, ChatMessage, ChatRequest};
use crate::domain::{
    CompetencyDimension, DialogueTurn, DimensionVerdict, Judgment, Phase, PositionOrder, Relation,
    SessionTranscript,
};
use crate::hash::derive_seed;
use crate::simulate::{fill_template, PromptTemplates, TemplateError};

/// Key of the overall verdict in the judge's reply.
pub const COMPREHENSIVE_KEY: &str = "Comprehensive Evaluation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn letter(self) -> char {
        match self {
            Self::A => 'A',
            Self::B => 'B',
        }
    }
}

/// The turns of one phase of one side.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSlice<'a> {
    pub side: Side,
    pub stage_index: usize,
    pub phase: Phase,
    pub turns: &'a [DialogueTurn],
    pub label: String,
}

impl StageSlice<'_> {
    /// Trigger turns inside this slice, 1-based.
    pub fn highlights(&self) -> Vec<(CompetencyDimension, usize)> {
        self.turns
            .iter()
            .filter_map(|t| t.triggered_dimension.map(|d| (d, t.turn + 1)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Presentation<'a> {
    pub slices: Vec<StageSlice<'a>>,
    pub model_a: String,
    pub model_b: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("no structured object found")]
    NoObject,
    #[error("missing dimension: {0}")]
    MissingDimension(String),
    #[error("unknown relation: {0}")]
    UnknownRelation(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BattleError {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("distinct-{n} is undefined: no therapist utterance has {n} tokens")]
    UndefinedMetric { n: usize },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("judgment unparseable after {attempts} attempts: {last}")]
    Judgment { attempts: u32, last: ParseError },
}

/// Cut a transcript into contiguous per-phase runs, in order.
pub fn slice_stages(transcript: &SessionTranscript) -> Result<Vec<(Phase, &[DialogueTurn])>, BattleError> {
    let turns = &transcript.turns;
    let mut out: Vec<(Phase, &[DialogueTurn])> = Vec::new();
    let mut start = 0;
    for i in 1..=turns.len() {
        if i == turns.len() || turns[i].phase != turns[start].phase {
            let phase = turns[start].phase;
            if out.iter().any(|(p, _)| *p == phase) {
                return Err(BattleError::Structural(format!(
                    "{}: phase {phase:?} is not contiguous",
                    transcript.session_id
                )));
            }
            out.push((phase, &turns[start..i]));
            start = i;
        }
    }
    Ok(out)
}

fn stage_label(phase: Phase, turns: &[DialogueTurn]) -> String {
    let highlights: Vec<String> = turns
        .iter()
        .filter_map(|t| t.triggered_dimension.map(|d| format!("{d}@{}", t.turn + 1)))
        .collect();
    let highlights = if highlights.is_empty() {
        "none".to_string()
    } else {
        highlights.join(", ")
    };
    format!("{} | highlight: {highlights}", phase.label())
}

fn to_slices(side: Side, stages: Vec<(Phase, &[DialogueTurn])>) -> Vec<StageSlice<'_>> {
    stages
        .into_iter()
        .map(|(phase, turns)| StageSlice {
            side,
            stage_index: phase.ordinal(),
            phase,
            turns,
            label: stage_label(phase, turns),
        })
        .collect()
}

/// Order stages so that odd stages read A then B and even stages B then A.
pub fn interleave<'a>(
    slices_a: Vec<StageSlice<'a>>,
    slices_b: Vec<StageSlice<'a>>,
    model_a: &str,
    model_b: &str,
) -> Result<Presentation<'a>, BattleError> {
    if slices_a.len() != slices_b.len() || slices_a.is_empty() {
        return Err(BattleError::Structural(format!(
            "stage count mismatch: {} vs {}",
            slices_a.len(),
            slices_b.len()
        )));
    }
    let mut slices = Vec::with_capacity(slices_a.len() * 2);
    for (k, (a, b)) in slices_a.into_iter().zip(slices_b).enumerate() {
        if k % 2 == 0 {
            slices.push(a);
            slices.push(b);
        } else {
            slices.push(b);
            slices.push(a);
        }
    }
    Ok(Presentation { slices, model_a: model_a.to_string(), model_b: model_b.to_string() })
}

/// Slice and interleave two transcripts; `first` is shown as Therapist A.
pub fn present<'a>(
    first: &'a SessionTranscript,
    second: &'a SessionTranscript,
) -> Result<Presentation<'a>, BattleError> {
    let a = to_slices(Side::A, slice_stages(first)?);
    let b = to_slices(Side::B, slice_stages(second)?);
    interleave(a, b, &first.model_id, &second.model_id)
}

/// Render the interleaved slices as the judge's dialogue history.
pub fn render_history(presentation: &Presentation<'_>) -> String {
    let mut out = String::new();
    for slice in &presentation.slices {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!(
            "=== [Therapist {}] Stage {}: {} ===\n",
            slice.side.letter(),
            slice.stage_index,
            slice.label
        ));
        for t in slice.turns {
            out.push_str(&format!("T{} Visitor: {}\n", t.turn + 1, t.client_utterance));
            out.push_str(&format!("T{} Therapist: {}\n", t.turn + 1, t.therapist_utterance));
        }
    }
    out
}

/// What one side looks like after reading a rendered history back.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SideView {
    /// Therapist utterances keyed by 1-based turn.
    pub therapist: BTreeMap<usize, String>,
    /// Highlighted (dimension, 1-based turn) pairs.
    pub highlights: Vec<(CompetencyDimension, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryView {
    pub a: SideView,
    pub b: SideView,
}

/// Inverse of [`render_history`], tolerant of surrounding prompt text.
pub fn parse_history(text: &str) -> HistoryView {
    let mut view = HistoryView::default();
    let mut current: Option<Side> = None;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("=== [Therapist ") {
            current = match rest.chars().next() {
                Some('A') => Some(Side::A),
                Some('B') => Some(Side::B),
                _ => None,
            };
            let side = match current {
                Some(Side::A) => &mut view.a,
                Some(Side::B) => &mut view.b,
                None => continue,
            };
            if let Some(h) = rest.find("| highlight: ") {
                let list = rest[h + 13..].trim_end_matches(" ===").trim();
                for item in list.split(", ") {
                    if let Some((dim, turn)) = item.split_once('@') {
                        if let (Ok(d), Ok(t)) = (dim.parse(), turn.parse()) {
                            side.highlights.push((d, t));
                        }
                    }
                }
            }
            continue;
        }
        let Some(side) = current else { continue };
        let Some(rest) = line.strip_prefix('T') else { continue };
        let Some((num, utterance)) = rest.split_once(" Therapist: ") else { continue };
        if let Ok(turn) = num.parse::<usize>() {
            let view_side = match side {
                Side::A => &mut view.a,
                Side::B => &mut view.b,
            };
            view_side.therapist.insert(turn, utterance.to_string());
        }
    }
    view
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenizer {
    #[default]
    Whitespace,
    Codepoint,
}

fn distinct_ratio<T: Hash + Eq>(tokens: &[T], n: usize) -> Option<f64> {
    if tokens.len() < n || n == 0 {
        return None;
    }
    let total = tokens.len() - n + 1;
    let distinct: HashSet<&[T]> = tokens.windows(n).collect();
    Some(distinct.len() as f64 / total as f64)
}

/// Distinct n-grams over total n-grams of the concatenated therapist
/// utterances of `utterances`.
pub fn distinct_n_of<'a>(
    utterances: impl IntoIterator<Item = &'a str>,
    n: usize,
    tokenizer: Tokenizer,
) -> Result<f64, BattleError> {
    let utterances: Vec<&str> = utterances.into_iter().collect();
    let long_enough = |u: &&str| match tokenizer {
        Tokenizer::Whitespace => u.split_whitespace().count() >= n,
        Tokenizer::Codepoint => u.chars().filter(|c| !c.is_whitespace()).count() >= n,
    };
    if n == 0 || !utterances.iter().any(long_enough) {
        return Err(BattleError::UndefinedMetric { n });
    }
    let ratio = match tokenizer {
        Tokenizer::Whitespace => {
            let tokens: Vec<&str> = utterances.iter().flat_map(|u| u.split_whitespace()).collect();
            distinct_ratio(&tokens, n)
        }
        Tokenizer::Codepoint => {
            let tokens: Vec<char> = utterances
                .iter()
                .flat_map(|u| u.chars())
                .filter(|c| !c.is_whitespace())
                .collect();
            distinct_ratio(&tokens, n)
        }
    };
    ratio.ok_or(BattleError::UndefinedMetric { n })
}

pub fn distinct_n(
    transcript: &SessionTranscript,
    n: usize,
    tokenizer: Tokenizer,
) -> Result<f64, BattleError> {
    distinct_n_of(transcript.turns.iter().map(|t| t.therapist_utterance.as_str()), n, tokenizer)
}

pub fn diversity_verdict(score_a: f64, score_b: f64, epsilon: f64) -> Relation {
    if (score_a - score_b).abs() <= epsilon {
        Relation::Tie
    } else if score_a > score_b {
        Relation::AWins
    } else {
        Relation::BWins
    }
}

fn relation_token(value: &Value) -> Result<Relation, ParseError> {
    let raw = match value {
        Value::String(s) => s.trim().to_string(),
        Value::Number(n) => n.to_string(),
        Value::Object(map) => {
            let inner = map
                .get("relation")
                .or_else(|| map.get("result"))
                .ok_or_else(|| ParseError::UnknownRelation(value.to_string()))?;
            return relation_token(inner);
        }
        other => other.to_string(),
    };
    match raw.as_str() {
        "A" => Ok(Relation::AWins),
        "B" => Ok(Relation::BWins),
        "0" => Ok(Relation::Tie),
        _ => Err(ParseError::UnknownRelation(raw)),
    }
}

fn rationale(value: &Value) -> String {
    value
        .get("reason")
        .or_else(|| value.get("rationale"))
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string()
}

/// First JSON object in `raw`, skipping any preamble and code fences.
fn first_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let mut from = 0;
    while let Some(pos) = raw[from..].find('{') {
        let start = from + pos;
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
        from = start + 1;
    }
    None
}

/// Parse a judge reply into a [`Judgment`].
pub fn parse_judgment(raw: &str) -> Result<Judgment, ParseError> {
    let map = first_object(raw).ok_or(ParseError::NoObject)?;
    let mut per_dimension = BTreeMap::new();
    for dim in CompetencyDimension::ALL {
        let value = map
            .get(dim.name())
            .ok_or_else(|| ParseError::MissingDimension(dim.name().to_string()))?;
        per_dimension.insert(
            dim,
            DimensionVerdict { relation: relation_token(value)?, rationale: rationale(value) },
        );
    }
    let comp = map
        .get(COMPREHENSIVE_KEY)
        .or_else(|| map.get("Comprehensive"))
        .ok_or_else(|| ParseError::MissingDimension(COMPREHENSIVE_KEY.to_string()))?;
    Ok(Judgment { per_dimension, comprehensive: relation_token(comp)? })
}

/// One line per dimension for the judge prompt.
pub fn eval_principles() -> String {
    use CompetencyDimension::*;
    CompetencyDimension::ALL
        .into_iter()
        .map(|d| {
            let text = match d {
                Empathy => "accurate, warm reception of the visitor's feelings",
                Discernment => "noticing what is unsaid or masked",
                Engagement => "drawing the visitor into active collaboration",
                Skill => "concrete, correctly applied counseling techniques",
                Suggestion => "well-paced, respectful suggestions",
                Reframing => "helping the visitor see beliefs from a new angle",
                Progression => "moving the session forward at the right moments",
                Trauma => "safe, paced handling of traumatic material",
                Crisis => "immediate attention to risk and safety",
                Ethics => "keeping professional boundaries and confidentiality",
                Diversity => "varied, non-repetitive language",
                Memory => "remembering and using what was said earlier",
            };
            format!("- {}: {text}", d.name())
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn output_format() -> String {
    let keys: Vec<String> = CompetencyDimension::ALL
        .iter()
        .map(|d| d.name().to_string())
        .chain(std::iter::once(COMPREHENSIVE_KEY.to_string()))
        .map(|k| format!("\"{k}\": {{\"relation\": \"A|B|0\", \"reason\": \"...\"}}"))
        .collect();
    format!(
        "Output strictly in JSON format with one entry per key. A = Therapist A better, B = Therapist B better, 0 = tie.\n{{{}}}",
        keys.join(", ")
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOptions {
    pub judge_model: String,
    pub max_reasks: u32,
    pub distinct_n: usize,
    pub tokenizer: Tokenizer,
    pub diversity_epsilon: f64,
}

impl Default for JudgeOptions {
    fn default() -> Self {
        Self {
            judge_model: "judge".to_string(),
            max_reasks: 2,
            distinct_n: 2,
            tokenizer: Tokenizer::Whitespace,
            diversity_epsilon: 0.01,
        }
    }
}

fn side_distinct(p: &Presentation<'_>, side: Side, opts: &JudgeOptions) -> Result<f64, BattleError> {
    let utterances = p
        .slices
        .iter()
        .filter(|s| s.side == side)
        .flat_map(|s| s.turns.iter().map(|t| t.therapist_utterance.as_str()));
    distinct_n_of(utterances, opts.distinct_n, opts.tokenizer)
}

/// Judge a presentation. Relations refer to presentation sides (A is the
/// side shown first). `diversity` may carry precomputed Distinct-N scores
/// for sides A and B.
pub fn judge_battle(
    judge: &dyn ChatBackend,
    presentation: &Presentation<'_>,
    templates: &PromptTemplates,
    opts: &JudgeOptions,
    seed: u64,
    diversity: Option<(f64, f64)>,
) -> Result<Judgment, BattleError> {
    let (div_a, div_b) = match diversity {
        Some(scores) => scores,
        None => (
            side_distinct(presentation, Side::A, opts)?,
            side_distinct(presentation, Side::B, opts)?,
        ),
    };
    let history = render_history(presentation);
    let principles = eval_principles();
    let format = output_format();
    let prompt = fill_template(
        &templates.judge_template,
        &[("history", &history), ("eval_principles", &principles), ("output_format", &format)],
    )?;
    let mut request = ChatRequest::new(opts.judge_model.as_str(), vec![ChatMessage::user(prompt)]);
    let attempts = opts.max_reasks + 1;
    let mut last = ParseError::NoObject;
    for attempt in 0..attempts {
        request.seed = Some(derive_seed(seed, &format!("judge/{attempt}")));
        let reply = judge.chat(&request)?;
        match parse_judgment(&reply.content) {
            Ok(mut judgment) => {
                judgment.per_dimension.insert(
                    CompetencyDimension::Diversity,
                    DimensionVerdict {
                        relation: diversity_verdict(div_a, div_b, opts.diversity_epsilon),
                        rationale: format!(
                            "distinct-{} {div_a:.4} vs {div_b:.4}",
                            opts.distinct_n
                        ),
                    },
                );
                return Ok(judgment);
            }
            Err(e) => {
                tracing::debug!(attempt, "judge reply unparseable: {e}");
                last = e;
            }
        }
    }
    Err(BattleError::Judgment { attempts, last })
}

/// Judge `model_a`'s transcript against `model_b`'s in the given order and
/// return the judgment in identity terms (`AWins` = `model_a` better).
#[allow(clippy::too_many_arguments)]
pub fn judge_pair(
    judge: &dyn ChatBackend,
    templates: &PromptTemplates,
    opts: &JudgeOptions,
    transcript_a: &SessionTranscript,
    transcript_b: &SessionTranscript,
    order: PositionOrder,
    seed: u64,
    diversity: Option<(f64, f64)>,
) -> Result<Judgment, BattleError> {
    match order {
        PositionOrder::AB => {
            let p = present(transcript_a, transcript_b)?;
            judge_battle(judge, &p, templates, opts, seed, diversity)
        }
        PositionOrder::BA => {
            let p = present(transcript_b, transcript_a)?;
            let swapped = diversity.map(|(a, b)| (b, a));
            Ok(judge_battle(judge, &p, templates, opts, seed, swapped)?.flipped())
        }
    }
}
