//! Word lists shared by the synthetic agents.
//!
//! Synthetic therapists encode their latent skill in how many marker words
//! of each dimension they use, and the synthetic judge decodes skill back
//! from those counts. The lists are pairwise disjoint so a token always
//! identifies one dimension.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::LazyLock;

use crate::domain::CompetencyDimension;

/// Skill points represented by one marker word on a local dimension.
pub const LOCAL_UNIT: f64 = 10.0;
/// Skill points represented by one marker word on a per-turn global dimension.
pub const GLOBAL_UNIT: f64 = 50.0;
/// Skill points per word of filler vocabulary.
pub const DIVERSITY_UNIT: f64 = 10.0;

const EMPATHY: &[&str] = &["hear", "heavy", "understandable", "warmth", "validate", "painful", "gentle", "carry"];
const DISCERNMENT: &[&str] = &["underneath", "notice", "hidden", "signal", "beneath", "unspoken", "cue", "subtle"];
const ENGAGEMENT: &[&str] = &["curious", "tell", "together", "explore", "wonder", "share", "listening", "invite"];
const SKILL: &[&str] = &["technique", "exercise", "grounding", "breathing", "method", "practice", "structured", "intervention"];
const SUGGESTION: &[&str] = &["perhaps", "option", "consider", "experiment", "step", "plan", "choice", "try"];
const REFRAMING: &[&str] = &["reframe", "perspective", "alternatively", "lens", "angle", "view", "reinterpret", "meaning"];
const PROGRESSION: &[&str] = &["next", "milestone", "progress", "forward", "goal", "advance", "stage", "pace"];
const TRAUMA: &[&str] = &["safe", "trauma", "paced", "stabilize", "window", "tolerance", "wound", "titrate"];
const CRISIS: &[&str] = &["hotline", "emergency", "immediate", "danger", "protect", "urgent", "safety", "lifeline"];
const ETHICS: &[&str] = &["confidential", "boundary", "consent", "referral", "limits", "professional", "respect", "duty"];
const DIVERSITY: &[&str] = &["varied", "diverse", "fresh", "novel", "assorted", "range", "different", "spectrum"];
const MEMORY: &[&str] = &["earlier", "mentioned", "remember", "recall", "before", "previously", "said", "recalled"];

/// Filler vocabulary. A therapist with diversity skill `s` draws from the
/// first `max(2, s / DIVERSITY_UNIT)` entries.
pub const FILLER: &[&str] = &[
    "so", "and", "it", "seems", "like", "this", "is", "a", "lot", "of", "what", "you", "are", "going",
    "through", "right", "now", "with", "all", "that", "we", "can", "look", "at", "how", "things", "have",
    "been", "for", "some", "time", "in", "your", "days", "week", "there", "were", "moments", "when",
    "maybe", "also", "just", "really", "quite", "kind", "sort", "way", "about", "which", "those", "these",
    "much", "more", "less", "often", "still", "again", "every", "while", "very", "truly", "simply",
    "mostly", "rather",
];

/// Short sentence openers; carry no dimension signal.
pub const OPENERS: &[&str] = &["Okay.", "Mm.", "Thanks.", "Yes.", "Alright."];

pub fn markers(dim: CompetencyDimension) -> &'static [&'static str] {
    use CompetencyDimension::*;
    match dim {
        Empathy => EMPATHY,
        Discernment => DISCERNMENT,
        Engagement => ENGAGEMENT,
        Skill => SKILL,
        Suggestion => SUGGESTION,
        Reframing => REFRAMING,
        Progression => PROGRESSION,
        Trauma => TRAUMA,
        Crisis => CRISIS,
        Ethics => ETHICS,
        Diversity => DIVERSITY,
        Memory => MEMORY,
    }
}

/// A recognised vocabulary word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Word {
    Marker(CompetencyDimension),
    /// Index into [`FILLER`].
    Filler(usize),
}

static VOCABULARY: LazyLock<HashMap<&'static str, Word>> = LazyLock::new(|| {
    let markers = CompetencyDimension::ALL
        .into_iter()
        .flat_map(|d| markers(d).iter().map(move |w| (*w, Word::Marker(d))));
    let filler = FILLER.iter().enumerate().map(|(i, w)| (*w, Word::Filler(i)));
    markers.chain(filler).collect()
});

/// Classify a token, ignoring case and surrounding punctuation.
pub fn classify(token: &str) -> Option<Word> {
    let word = trim(token);
    let word = if word.bytes().any(|b| b.is_ascii_uppercase()) {
        Cow::Owned(word.to_ascii_lowercase())
    } else {
        Cow::Borrowed(word)
    };
    VOCABULARY.get(word.as_ref()).copied()
}

/// The dimension a token marks, if any. Punctuation is ignored.
pub fn marker_dimension(token: &str) -> Option<CompetencyDimension> {
    match classify(token)? {
        Word::Marker(d) => Some(d),
        Word::Filler(_) => None,
    }
}

/// Number of tokens in `text` that mark `dim`.
pub fn count_markers(text: &str, dim: CompetencyDimension) -> usize {
    text.split_whitespace().filter(|t| marker_dimension(t) == Some(dim)).count()
}

fn trim(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Lowercase a token and strip surrounding punctuation.
pub fn normalize(token: &str) -> String {
    trim(token).to_lowercase()
}

/// Sentence a scripted client utters on a turn that probes `dim`. Each
/// sentence carries a unique bracketed tag so it can be recognised again.
pub fn trigger_sentence(dim: CompetencyDimension) -> &'static str {
    use CompetencyDimension::*;
    match dim {
        Discernment => "I'm fine, really, it's nothing. [probe:discernment]",
        Skill => "I don't know what to actually do when it starts. [probe:skill]",
        Suggestion => "What should I even try next? [probe:suggestion]",
        Reframing => "It always proves that I'm a failure. [probe:reframing]",
        Progression => "I guess we covered that, what now? [probe:progression]",
        Trauma => "It reminds me of that day and I freeze. [probe:trauma]",
        Crisis => "Sometimes I think it would be easier to disappear. [probe:crisis]",
        Ethics => "Could you just tell my mother what I said? [probe:ethics]",
        Memory => "Like I told you about before, it happened again. [probe:memory]",
        Empathy => "I feel so alone with this. [probe:empathy]",
        Engagement => "I don't really want to talk today. [probe:engagement]",
        Diversity => "You always say the same thing. [probe:diversity]",
    }
}

/// The dimension probed by a client message, found by its trigger tag.
pub fn probed_dimension(message: &str) -> Option<CompetencyDimension> {
    let start = message.find("[probe:")?;
    let rest = &message[start + 7..];
    let end = rest.find(']')?;
    rest[..end].parse().ok()
}
