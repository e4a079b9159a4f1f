//! Shared domain types: competency and phase taxonomies, client profiles,
//! simulation scripts, transcripts and battle records.
//!
//! Turn indices are 0-based everywhere in this crate. Human-facing renderings
//! (prompts, reports) add one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the twelve judged axes of therapeutic skill.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CompetencyDimension {
    Empathy,
    Discernment,
    Engagement,
    Skill,
    Suggestion,
    Reframing,
    Progression,
    Trauma,
    Crisis,
    Ethics,
    Diversity,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    /// Judged over the whole session.
    Global,
    /// Judged at the scripted trigger turns.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    AllianceBuilding,
    ProfessionalTechnique,
    ReliabilitySupport,
}

impl CompetencyDimension {
    pub const ALL: [CompetencyDimension; 12] = [
        Self::Empathy,
        Self::Discernment,
        Self::Engagement,
        Self::Skill,
        Self::Suggestion,
        Self::Reframing,
        Self::Progression,
        Self::Trauma,
        Self::Crisis,
        Self::Ethics,
        Self::Diversity,
        Self::Memory,
    ];

    pub fn scope(self) -> Scope {
        match self {
            Self::Empathy | Self::Engagement | Self::Diversity => Scope::Global,
            _ => Scope::Local,
        }
    }

    pub fn is_local(self) -> bool {
        self.scope() == Scope::Local
    }

    pub fn category(self) -> Category {
        match self {
            Self::Empathy | Self::Discernment | Self::Engagement => Category::AllianceBuilding,
            Self::Skill | Self::Suggestion | Self::Reframing | Self::Progression | Self::Trauma => {
                Category::ProfessionalTechnique
            }
            Self::Crisis | Self::Ethics | Self::Diversity | Self::Memory => {
                Category::ReliabilitySupport
            }
        }
    }

    pub fn locals() -> impl Iterator<Item = CompetencyDimension> {
        Self::ALL.into_iter().filter(|d| d.is_local())
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Empathy => "Empathy",
            Self::Discernment => "Discernment",
            Self::Engagement => "Engagement",
            Self::Skill => "Skill",
            Self::Suggestion => "Suggestion",
            Self::Reframing => "Reframing",
            Self::Progression => "Progression",
            Self::Trauma => "Trauma",
            Self::Crisis => "Crisis",
            Self::Ethics => "Ethics",
            Self::Diversity => "Diversity",
            Self::Memory => "Memory",
        }
    }
}

impl fmt::Display for CompetencyDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompetencyDimension {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim();
        Self::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(wanted))
            .ok_or_else(|| DomainError::UnknownDimension(s.to_string()))
    }
}

/// The five ordered counseling phases a session moves through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    AllianceBuilding,
    PatternAwareness,
    CoreConflictTrauma,
    CorrectiveExperience,
    IntegrationTermination,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Self::AllianceBuilding,
        Self::PatternAwareness,
        Self::CoreConflictTrauma,
        Self::CorrectiveExperience,
        Self::IntegrationTermination,
    ];

    /// 1-based position in the phase order.
    pub fn ordinal(self) -> usize {
        self as usize + 1
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::AllianceBuilding => "Alliance building and initial assessment",
            Self::PatternAwareness => "Pattern awareness and issue concretization",
            Self::CoreConflictTrauma => "Core conflict evolution and trauma processing",
            Self::CorrectiveExperience => "Corrective experience and new behavior",
            Self::IntegrationTermination => "Integration, review and termination",
        }
    }
}

/// A phase together with the inclusive turn range it occupies in a script.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub phase: Phase,
    pub first_turn: usize,
    pub last_turn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub gender: String,
    #[serde(default)]
    pub age: String,
    #[serde(default)]
    pub occupation: String,
    pub topic: String,
    #[serde(default)]
    pub subtopic: String,
    #[serde(default)]
    pub personality: Vec<String>,
    pub situation: String,
    #[serde(default)]
    pub event_context: String,
    #[serde(default)]
    pub emotional_words: Vec<String>,
    pub core_drive: String,
    #[serde(default)]
    pub reaction_pattern: String,
    #[serde(default)]
    pub social_support: Vec<String>,
    #[serde(default)]
    pub formative_experiences: Vec<String>,
    #[serde(default)]
    pub interests_values: String,
}

impl ClientProfile {
    /// Names of required fields that are blank.
    pub fn blank_required_fields(&self) -> Vec<&'static str> {
        let mut blank = Vec::new();
        for (name, value) in [
            ("id", &self.id),
            ("name", &self.name),
            ("topic", &self.topic),
            ("situation", &self.situation),
            ("core_drive", &self.core_drive),
        ] {
            if value.trim().is_empty() {
                blank.push(name);
            }
        }
        blank
    }
}

/// Check a profile set: required fields present and ids unique.
pub fn validate_profiles(profiles: &[ClientProfile]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for p in profiles {
        for field in p.blank_required_fields() {
            out.push(Violation::BlankProfileField {
                profile: p.id.clone(),
                field,
            });
        }
        if !seen.insert(p.id.as_str()) {
            out.push(Violation::DuplicateProfileId(p.id.clone()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnDirective {
    pub turn: usize,
    pub phase: Phase,
    #[serde(default)]
    pub target_dimension: Option<CompetencyDimension>,
    #[serde(default)]
    pub session_theme: String,
    #[serde(default)]
    pub emotional_state: String,
    #[serde(default)]
    pub memories: Vec<String>,
    #[serde(default)]
    pub verbal_pattern: String,
    #[serde(default)]
    pub resistance: String,
    #[serde(default)]
    pub is_empty: bool,
}

impl TurnDirective {
    /// A turn with no acting content: the client only acknowledges.
    pub fn empty(turn: usize, phase: Phase) -> Self {
        Self {
            turn,
            phase,
            target_dimension: None,
            session_theme: String::new(),
            emotional_state: String::new(),
            memories: Vec::new(),
            verbal_pattern: String::new(),
            resistance: String::new(),
            is_empty: true,
        }
    }

    fn has_acting_text(&self) -> bool {
        !self.session_theme.is_empty()
            || !self.emotional_state.is_empty()
            || !self.memories.is_empty()
            || !self.verbal_pattern.is_empty()
            || !self.resistance.is_empty()
    }
}

pub const DEFAULT_TOTAL_TURNS: usize = 44;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationScript {
    #[serde(default)]
    pub script_id: String,
    pub client_id: String,
    pub directives: Vec<TurnDirective>,
    pub total_turns: usize,
}

impl SimulationScript {
    pub fn directive(&self, t: usize) -> Result<&TurnDirective, DomainError> {
        if t >= self.total_turns {
            return Err(DomainError::TurnOutOfRange {
                turn: t,
                total: self.total_turns,
            });
        }
        self.directives
            .get(t)
            .filter(|d| d.turn == t)
            .or_else(|| self.directives.iter().find(|d| d.turn == t))
            .ok_or(DomainError::TurnOutOfRange {
                turn: t,
                total: self.total_turns,
            })
    }

    /// Contiguous phase spans in directive order.
    pub fn phase_spans(&self) -> Vec<PhaseSpan> {
        let mut spans: Vec<PhaseSpan> = Vec::new();
        for d in &self.directives {
            match spans.last_mut() {
                Some(span) if span.phase == d.phase => span.last_turn = d.turn,
                _ => spans.push(PhaseSpan {
                    phase: d.phase,
                    first_turn: d.turn,
                    last_turn: d.turn,
                }),
            }
        }
        spans
    }

    /// Turns that target `dim`, in order.
    pub fn trigger_turns(&self, dim: CompetencyDimension) -> Vec<usize> {
        self.directives
            .iter()
            .filter(|d| d.target_dimension == Some(dim))
            .map(|d| d.turn)
            .collect()
    }
}

/// The phase scripted for turn `t`.
pub fn phase_of_turn(script: &SimulationScript, t: usize) -> Result<Phase, DomainError> {
    script.directive(t).map(|d| d.phase)
}

/// A single problem found by [`validate_script`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    ClientMismatch { script: String, profile: String },
    BlankProfileField { profile: String, field: &'static str },
    DuplicateProfileId(String),
    TotalTurnsMismatch { declared: usize, directives: usize },
    TurnIndex { position: usize, found: usize },
    EmptyTurnHasContent { turn: usize },
    GlobalTarget { turn: usize, dimension: CompetencyDimension },
    UncoveredLocalDimension(CompetencyDimension),
    NonMonotonePhaseOrder { turn: usize },
    MissingPhase(Phase),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ClientMismatch { script, profile } => {
                write!(f, "script client_id {script} does not match profile {profile}")
            }
            Self::BlankProfileField { profile, field } => {
                write!(f, "profile {profile}: required field {field} is blank")
            }
            Self::DuplicateProfileId(id) => write!(f, "duplicate profile id: {id}"),
            Self::TotalTurnsMismatch { declared, directives } => write!(
                f,
                "total_turns is {declared} but script has {directives} directives"
            ),
            Self::TurnIndex { position, found } => write!(
                f,
                "turn index gap or duplicate: position {position} holds turn {found}"
            ),
            Self::EmptyTurnHasContent { turn } => {
                write!(f, "empty turn {turn} carries a target or acting text")
            }
            Self::GlobalTarget { turn, dimension } => {
                write!(f, "turn {turn} targets global dimension {dimension}")
            }
            Self::UncoveredLocalDimension(d) => write!(f, "uncovered local dimension: {d}"),
            Self::NonMonotonePhaseOrder { turn } => {
                write!(f, "non-monotone phase order (at turn {turn})")
            }
            Self::MissingPhase(p) => write!(f, "phase {p:?} has no turns"),
        }
    }
}

/// Check every script invariant against its profile. An empty report means
/// the script is valid.
pub fn validate_script(script: &SimulationScript, profile: &ClientProfile) -> Vec<Violation> {
    let mut out = Vec::new();
    if script.client_id != profile.id {
        out.push(Violation::ClientMismatch {
            script: script.client_id.clone(),
            profile: profile.id.clone(),
        });
    }
    for field in profile.blank_required_fields() {
        out.push(Violation::BlankProfileField {
            profile: profile.id.clone(),
            field,
        });
    }
    if script.directives.len() != script.total_turns {
        out.push(Violation::TotalTurnsMismatch {
            declared: script.total_turns,
            directives: script.directives.len(),
        });
    }
    for (position, d) in script.directives.iter().enumerate() {
        if d.turn != position {
            out.push(Violation::TurnIndex {
                position,
                found: d.turn,
            });
        }
        if d.is_empty && (d.target_dimension.is_some() || d.has_acting_text()) {
            out.push(Violation::EmptyTurnHasContent { turn: d.turn });
        }
        if let Some(dim) = d.target_dimension {
            if !dim.is_local() {
                out.push(Violation::GlobalTarget {
                    turn: d.turn,
                    dimension: dim,
                });
            }
        }
    }
    for w in script.directives.windows(2) {
        if w[1].phase < w[0].phase {
            out.push(Violation::NonMonotonePhaseOrder { turn: w[1].turn });
        }
    }
    let targeted: BTreeSet<CompetencyDimension> = script
        .directives
        .iter()
        .filter_map(|d| d.target_dimension)
        .collect();
    for dim in CompetencyDimension::locals() {
        if !targeted.contains(&dim) {
            out.push(Violation::UncoveredLocalDimension(dim));
        }
    }
    let present: BTreeSet<Phase> = script.directives.iter().map(|d| d.phase).collect();
    for phase in Phase::ALL {
        if !present.contains(&phase) {
            out.push(Violation::MissingPhase(phase));
        }
    }
    out
}

/// Relative weights of the scripted turns per phase (5/5/15/10/5 of 40).
const PHASE_WEIGHTS: [usize; 5] = [5, 5, 15, 10, 5];
const EMPTY_TURNS: usize = 4;

/// Local dimensions probed in each phase, in order of appearance.
const TRIGGER_PLAN: [&[CompetencyDimension]; 5] = {
    use CompetencyDimension::*;
    [
        &[Discernment],
        &[Reframing, Discernment, Progression],
        &[Trauma, Skill, Crisis, Memory, Reframing, Trauma],
        &[Suggestion, Skill, Ethics, Memory, Crisis],
        &[Suggestion, Ethics, Progression],
    ]
};

/// Split `total` into parts proportional to `weights` (largest remainder),
/// each part at least one.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let wsum: usize = weights.iter().sum();
    let mut parts: Vec<usize> = weights.iter().map(|w| total * w / wsum).collect();
    let mut rema: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (total * w % wsum, i))
        .collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - parts.iter().sum::<usize>();
    for (_, i) in rema {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    while let Some(zero) = parts.iter().position(|&p| p == 0) {
        let (largest, _) = parts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        parts[largest] -= 1;
        parts[zero] += 1;
    }
    parts
}

fn trigger_positions(phase_len: usize, triggers: usize) -> Vec<usize> {
    if triggers >= phase_len {
        return (0..phase_len).collect();
    }
    (0..triggers)
        .map(|k| (k + 1) * phase_len / (triggers + 1))
        .collect()
}

const VERBAL_PATTERNS: [&str; 5] = [
    "Describe events factually and avoid naming feelings.",
    "Talk about the problem in the third person, a little abstractly.",
    "Narrate calmly and monotonously, with concrete details.",
    "Get absorbed in describing your hobbies to steer away from people.",
    "Speak more openly and try out new words for your feelings.",
];

const RESISTANCES: [&str; 5] = [
    "Deflect direct questions about feelings once.",
    "Push back if the counselor labels you too quickly.",
    "Go quiet when the memory gets too close, then continue.",
    "Doubt that small changes can matter.",
    "Minimal resistance; test whether progress will last.",
];

/// Build the default script for `profile`: 40 scripted turns in the
/// 5/5/15/10/5 phase split plus one empty turn after each of the first four
/// phases. Other lengths rescale the split; at least 13 turns are needed so
/// that every local dimension can be probed.
pub fn default_script(
    profile: &ClientProfile,
    total_turns: usize,
) -> Result<SimulationScript, DomainError> {
    if total_turns < EMPTY_TURNS + 9 {
        return Err(DomainError::ScriptTooShort(total_turns));
    }
    let scripted = apportion(total_turns - EMPTY_TURNS, &PHASE_WEIGHTS);
    let mut directives = Vec::with_capacity(total_turns);
    let emotions: Vec<&str> = if profile.emotional_words.is_empty() {
        vec!["unease"]
    } else {
        profile.emotional_words.iter().map(String::as_str).collect()
    };
    for (pi, phase) in Phase::ALL.into_iter().enumerate() {
        let len = scripted[pi];
        let positions = trigger_positions(len, TRIGGER_PLAN[pi].len());
        for k in 0..len {
            let turn = directives.len();
            let target = positions
                .iter()
                .position(|&p| p == k)
                .map(|slot| TRIGGER_PLAN[pi][slot]);
            let memories = profile
                .formative_experiences
                .get(turn % profile.formative_experiences.len().max(1))
                .cloned()
                .into_iter()
                .collect();
            directives.push(TurnDirective {
                turn,
                phase,
                target_dimension: target,
                session_theme: format!(
                    "stage {} step {}, return to {}",
                    phase.ordinal(),
                    k + 1,
                    profile.topic.to_lowercase()
                ),
                emotional_state: emotions[turn % emotions.len()].to_string(),
                memories,
                verbal_pattern: VERBAL_PATTERNS[pi].to_string(),
                resistance: RESISTANCES[pi].to_string(),
                is_empty: false,
            });
        }
        if pi < EMPTY_TURNS {
            let turn = directives.len();
            directives.push(TurnDirective::empty(turn, phase));
        }
    }
    let script = SimulationScript {
        script_id: format!("{}-default-{}", profile.id, total_turns),
        client_id: profile.id.clone(),
        directives,
        total_turns,
    };
    if CompetencyDimension::locals().any(|d| script.trigger_turns(d).is_empty()) {
        return Err(DomainError::ScriptTooShort(total_turns));
    }
    Ok(script)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub turn: usize,
    pub client_utterance: String,
    pub therapist_utterance: String,
    pub phase: Phase,
    #[serde(default)]
    pub triggered_dimension: Option<CompetencyDimension>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub session_id: String,
    pub model_id: String,
    pub client_id: String,
    pub script_id: String,
    pub turns: Vec<DialogueTurn>,
    pub seed: u64,
    #[serde(default)]
    pub backend_meta: BTreeMap<String, String>,
}

/// Outcome of a comparison between side A and side B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    AWins,
    BWins,
    Tie,
}

impl Relation {
    /// Numeric outcome for side A: 1, 0 or 0.5.
    pub fn y(self) -> f64 {
        match self {
            Self::AWins => 1.0,
            Self::BWins => 0.0,
            Self::Tie => 0.5,
        }
    }

    /// The same outcome seen from the other side.
    pub fn flip(self) -> Self {
        match self {
            Self::AWins => Self::BWins,
            Self::BWins => Self::AWins,
            Self::Tie => Self::Tie,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionVerdict {
    pub relation: Relation,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub per_dimension: BTreeMap<CompetencyDimension, DimensionVerdict>,
    pub comprehensive: Relation,
}

impl Judgment {
    pub fn relation(&self, dim: CompetencyDimension) -> Option<Relation> {
        self.per_dimension.get(&dim).map(|v| v.relation)
    }

    /// Relation for `dim`, or the comprehensive relation when `dim` is `None`.
    pub fn relation_for(&self, dim: Option<CompetencyDimension>) -> Option<Relation> {
        match dim {
            Some(d) => self.relation(d),
            None => Some(self.comprehensive),
        }
    }

    /// Swap the roles of A and B in every relation.
    pub fn flipped(&self) -> Judgment {
        Judgment {
            per_dimension: self
                .per_dimension
                .iter()
                .map(|(d, v)| {
                    (
                        *d,
                        DimensionVerdict {
                            relation: v.relation.flip(),
                            rationale: v.rationale.clone(),
                        },
                    )
                })
                .collect(),
            comprehensive: self.comprehensive.flip(),
        }
    }

    pub fn covers_all_dimensions(&self) -> bool {
        CompetencyDimension::ALL
            .iter()
            .all(|d| self.per_dimension.contains_key(d))
    }
}

/// Which model was shown first: `AB` puts `model_a` in the leading position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PositionOrder {
    AB,
    BA,
}

impl PositionOrder {
    pub fn swapped(self) -> Self {
        match self {
            Self::AB => Self::BA,
            Self::BA => Self::AB,
        }
    }
}

/// One judged battle. Relations in `judgment` always refer to model
/// identities (`AWins` means `model_a` was better) regardless of the order
/// in which the two transcripts were shown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BattleRecord {
    pub battle_id: String,
    pub round: u32,
    pub client_id: String,
    pub model_a: String,
    pub model_b: String,
    pub position_order: PositionOrder,
    pub judgment: Judgment,
    pub judge_id: String,
    pub timestamp: String,
}

impl BattleRecord {
    /// Comprehensive relation seen from the first-shown side.
    pub fn first_position_relation(&self) -> Relation {
        match self.position_order {
            PositionOrder::AB => self.judgment.comprehensive,
            PositionOrder::BA => self.judgment.comprehensive.flip(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("turn {turn} out of range (script has {total} turns)")]
    TurnOutOfRange { turn: usize, total: usize },
    #[error("unknown competency dimension: {0}")]
    UnknownDimension(String),
    #[error("a {0}-turn script cannot cover every phase and local dimension")]
    ScriptTooShort(usize),
}
