//! Deterministic synthetic agents.
//!
//! Every reply is a pure function of the backend seed and the request
//! fingerprint. The therapist writes its latent skill into marker-word
//! counts; the judge reads those counts back out of the rendered battle
//! history and draws relations through a logistic link.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use super::{BackendConfig, BackendError, ChatBackend, ChatRequest, ChatResponse, SkillVector};
use crate::battle::{parse_history, SideView, COMPREHENSIVE_KEY};
use crate::domain::{CompetencyDimension, Relation};
use crate::hash::Fnv1a;
use crate::lexicon::{self, Word, DIVERSITY_UNIT, FILLER, GLOBAL_UNIT, LOCAL_UNIT, OPENERS};
use crate::ELO_XI;

/// Filler words in every synthetic therapist utterance.
pub const FILLER_PER_TURN: usize = 8;

fn reply_rng(seed: u64, request: &ChatRequest) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(Fnv1a::new().write_u64(seed).write_u64(request.fingerprint()).finish())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `floor(x + u)` with `u ~ U[0, 1)`: an integer whose mean is `x`.
fn dither(x: f64, rng: &mut impl Rng) -> usize {
    (x.max(0.0) + rng.random::<f64>()).floor() as usize
}

/// Probability that the synthetic judge prefers A.
pub fn judge_win_probability(noise: f64, skill_a: f64, skill_b: f64, xi: f64) -> f64 {
    (1.0 - noise) * sigmoid((skill_a - skill_b) / xi) + noise * 0.5
}

/// Draw `AWins` with probability `(1 - noise) * σ((a - b) / xi) + noise / 2`,
/// otherwise `BWins`.
pub fn synthetic_judge_relation(
    noise: f64,
    skill_a: f64,
    skill_b: f64,
    xi: f64,
    rng: &mut impl Rng,
) -> Relation {
    if rng.random::<f64>() < judge_win_probability(noise, skill_a, skill_b, xi) {
        Relation::AWins
    } else {
        Relation::BWins
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTherapist {
    skill: SkillVector,
    seed: u64,
}

impl SyntheticTherapist {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        let skill = config
            .skill
            .clone()
            .ok_or_else(|| BackendError::Config("SyntheticTherapist requires skill".into()))?;
        Ok(Self { skill, seed: config.seed })
    }

    /// Size of the filler vocabulary for a diversity skill.
    pub fn vocabulary_size(diversity: f64) -> usize {
        ((diversity / DIVERSITY_UNIT).floor().max(2.0) as usize).min(FILLER.len())
    }

    pub fn utterance(&self, request: &ChatRequest) -> String {
        let mut rng = reply_rng(self.seed, request);
        let probed = request.last_user().and_then(lexicon::probed_dimension);
        let mut words: Vec<&str> = Vec::new();
        for dim in [CompetencyDimension::Empathy, CompetencyDimension::Engagement] {
            let n = dither(self.skill.get(dim) / GLOBAL_UNIT, &mut rng);
            words.extend((0..n).filter_map(|_| lexicon::markers(dim).choose(&mut rng)));
        }
        if let Some(dim) = probed.filter(|d| d.is_local()) {
            let n = dither(self.skill.get(dim) / LOCAL_UNIT, &mut rng);
            words.extend((0..n).filter_map(|_| lexicon::markers(dim).choose(&mut rng)));
        }
        let vocab = &FILLER[..Self::vocabulary_size(self.skill.get(CompetencyDimension::Diversity))];
        words.extend((0..FILLER_PER_TURN).filter_map(|_| vocab.choose(&mut rng)));
        words.shuffle(&mut rng);
        let opener = OPENERS.choose(&mut rng).copied().unwrap_or("Okay.");
        format!("{opener} {}.", words.join(" "))
    }
}

impl ChatBackend for SyntheticTherapist {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        Ok(ChatResponse::stop(self.utterance(request), 0, 1))
    }
}

/// Plays the client by following the probe line of its system prompt.
#[derive(Debug, Clone)]
pub struct ScriptReplay {
    seed: u64,
}

const ACKNOWLEDGEMENTS: [&str; 4] = ["Okay.", "Mm, I see.", "Right.", "Okay, thanks."];
const CONNECTORS: [&str; 4] = ["Honestly,", "Lately", "Today", "I guess"];

impl ScriptReplay {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn utterance(&self, request: &ChatRequest) -> String {
        let mut rng = reply_rng(self.seed, request);
        let prompt = request.system_prompt().unwrap_or_default();
        let mut trigger = None;
        let mut emotion = None;
        for line in prompt.lines() {
            let line = line.trim();
            if line.starts_with("NEUTRAL:") {
                return ACKNOWLEDGEMENTS.choose(&mut rng).copied().unwrap_or("Okay.").to_string();
            }
            if line.starts_with("PROBE[") {
                trigger = line
                    .find("Say: \"")
                    .map(|i| &line[i + 6..])
                    .and_then(|rest| rest.rfind('"').map(|j| &rest[..j]));
            }
            if let Some(rest) = line.strip_prefix("Emotional state:") {
                emotion = Some(rest.trim()).filter(|e| !e.is_empty());
            }
        }
        let connector = CONNECTORS.choose(&mut rng).copied().unwrap_or("Lately");
        let feeling = format!("{connector} I feel {}.", emotion.unwrap_or("unsettled").to_lowercase());
        match trigger {
            Some(t) => format!("{t} {feeling}"),
            None => feeling,
        }
    }
}

impl ChatBackend for ScriptReplay {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        Ok(ChatResponse::stop(self.utterance(request), 0, 1))
    }
}

/// Pairwise judge that decodes skill from marker words.
#[derive(Debug, Clone)]
pub struct SyntheticJudge {
    noise: f64,
    seed: u64,
    tie_margin: f64,
    position_bias: f64,
}

/// Decoded skill estimates of one side, indexed by [`CompetencyDimension::index`].
pub fn decode_skills(side: &SideView) -> [f64; 12] {
    let mut counts: BTreeMap<usize, [usize; 12]> = BTreeMap::new();
    let mut fillers = BTreeSet::new();
    for (turn, text) in &side.therapist {
        let row = counts.entry(*turn).or_default();
        for t in text.split_whitespace() {
            match lexicon::classify(t) {
                Some(Word::Marker(dim)) => row[dim.index()] += 1,
                Some(Word::Filler(pos)) => {
                    fillers.insert(pos);
                }
                None => {}
            }
        }
    }
    let mut out = [0.0; 12];
    for dim in CompetencyDimension::ALL {
        let i = dim.index();
        out[i] = if dim == CompetencyDimension::Diversity {
            DIVERSITY_UNIT * fillers.len() as f64
        } else if dim.is_local() {
            let hits: Vec<usize> = side
                .highlights
                .iter()
                .filter(|(d, _)| *d == dim)
                .filter_map(|(_, t)| counts.get(t).map(|row| row[i]))
                .collect();
            mean_count(&hits, LOCAL_UNIT)
        } else {
            let all: Vec<usize> = counts.values().map(|row| row[i]).collect();
            mean_count(&all, GLOBAL_UNIT)
        };
    }
    out
}

fn mean_count(counts: &[usize], unit: f64) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    unit * counts.iter().sum::<usize>() as f64 / counts.len() as f64
}

impl SyntheticJudge {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        let noise = config
            .noise
            .ok_or_else(|| BackendError::Config("SyntheticJudge requires noise".into()))?;
        Ok(Self {
            noise,
            seed: config.seed,
            tie_margin: config.tie_margin,
            position_bias: config.position_bias,
        })
    }

    fn relation(&self, a: f64, b: f64, rng: &mut ChaCha8Rng) -> Relation {
        let a = a + self.position_bias;
        if self.tie_margin > 0.0 && (a - b).abs() <= self.tie_margin {
            return Relation::Tie;
        }
        synthetic_judge_relation(self.noise, a, b, ELO_XI, rng)
    }

    pub fn verdict_json(&self, request: &ChatRequest) -> String {
        let mut rng = reply_rng(self.seed, request);
        let prompt = request.last_user().unwrap_or_default();
        let view = parse_history(prompt);
        let mut out = Map::new();
        let (mut sum_a, mut sum_b) = (0.0, 0.0);
        let (skills_a, skills_b) = (decode_skills(&view.a), decode_skills(&view.b));
        for dim in CompetencyDimension::ALL {
            let (a, b) = (skills_a[dim.index()], skills_b[dim.index()]);
            if dim != CompetencyDimension::Diversity {
                sum_a += a;
                sum_b += b;
            }
            let rel = self.relation(a, b, &mut rng);
            out.insert(
                dim.name().to_string(),
                json!({"relation": token(rel), "reason": format!("decoded {a:.1} vs {b:.1}")}),
            );
        }
        let rel = self.relation(sum_a / 11.0, sum_b / 11.0, &mut rng);
        out.insert(
            COMPREHENSIVE_KEY.to_string(),
            json!({"relation": token(rel), "reason": "mean of decoded skills"}),
        );
        Value::Object(out).to_string()
    }
}

fn token(rel: Relation) -> &'static str {
    match rel {
        Relation::AWins => "A",
        Relation::BWins => "B",
        Relation::Tie => "0",
    }
}

impl ChatBackend for SyntheticJudge {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        Ok(ChatResponse::stop(self.verdict_json(request), 0, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ChatMessage;
    use proptest::prelude::*;

    fn freq(noise: f64, a: f64, b: f64, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wins = (0..n)
            .filter(|_| synthetic_judge_relation(noise, a, b, ELO_XI, &mut rng) == Relation::AWins)
            .count();
        wins as f64 / n as f64
    }

    #[test]
    fn equal_skill_is_a_coin_flip() {
        // 3σ for p = 0.5 over 10,000 draws is 0.015
        for noise in [0.0, 0.3, 1.0] {
            assert!((freq(noise, 150.0, 150.0, 10_000, 3) - 0.5).abs() < 0.015);
        }
    }

    #[test]
    fn gap_400_wins_ten_of_eleven() {
        let expected = 1.0 / (1.0 + (-400.0f64 / ELO_XI).exp());
        assert!((expected - 10.0 / 11.0).abs() < 1e-12);
        assert!((freq(0.0, 500.0, 100.0, 10_000, 4) - 10.0 / 11.0).abs() < 0.01);
    }

    #[test]
    fn full_noise_ignores_gap() {
        assert_eq!(judge_win_probability(1.0, 900.0, 0.0, ELO_XI), 0.5);
        assert!((freq(1.0, 900.0, 0.0, 10_000, 5) - 0.5).abs() < 0.015);
    }

    #[test]
    fn never_returns_tie() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| synthetic_judge_relation(0.2, 0.0, 0.0, ELO_XI, &mut rng) != Relation::Tie));
    }

    fn therapist_request(last: &str) -> ChatRequest {
        ChatRequest::new(
            "t",
            vec![ChatMessage::system("You are a counselor."), ChatMessage::user(last)],
        )
    }

    #[test]
    fn therapist_is_byte_deterministic() {
        let cfg = BackendConfig::synthetic_therapist(SkillVector::uniform(150.0, 42));
        let t = SyntheticTherapist::new(&cfg).unwrap();
        let req = therapist_request("hello");
        assert_eq!(t.chat(&req).unwrap().content, t.chat(&req).unwrap().content);
        let other = SyntheticTherapist::new(&BackendConfig {
            seed: 43,
            ..cfg.clone()
        })
        .unwrap();
        assert_ne!(t.utterance(&req), other.utterance(&req));
    }

    #[test]
    fn probed_marker_count_tracks_skill() {
        let msg = lexicon::trigger_sentence(CompetencyDimension::Crisis);
        let mean_count = |skill: f64| {
            let t = SyntheticTherapist::new(&BackendConfig::synthetic_therapist(
                SkillVector::uniform(skill, 7),
            ))
            .unwrap();
            (0..200)
                .map(|i| {
                    let u = t.utterance(&therapist_request(&format!("{msg} {i}")));
                    lexicon::count_markers(&u, CompetencyDimension::Crisis) as f64
                })
                .sum::<f64>()
                / 200.0
        };
        assert!((mean_count(150.0) - 15.0).abs() < 0.2);
        assert!((mean_count(230.0) - 23.0).abs() < 0.2);
    }

    #[test]
    fn vocabulary_grows_with_diversity() {
        assert_eq!(SyntheticTherapist::vocabulary_size(5.0), 2);
        assert_eq!(SyntheticTherapist::vocabulary_size(125.0), 12);
        assert_eq!(SyntheticTherapist::vocabulary_size(1e6), FILLER.len());
    }

    #[test]
    fn replay_follows_probe_and_neutral_lines() {
        let r = ScriptReplay::new(1);
        let probe = ChatRequest::new(
            "c",
            vec![
                ChatMessage::system(format!(
                    "Emotional state: Fear\nPROBE[Crisis]: hint at danger. Say: \"{}\"",
                    lexicon::trigger_sentence(CompetencyDimension::Crisis)
                )),
                ChatMessage::user("Begin."),
            ],
        );
        let out = r.utterance(&probe);
        assert_eq!(lexicon::probed_dimension(&out), Some(CompetencyDimension::Crisis));
        assert!(out.contains("fear"));
        let neutral = ChatRequest::new(
            "c",
            vec![ChatMessage::system("NEUTRAL: acknowledge briefly."), ChatMessage::user("x")],
        );
        assert!(ACKNOWLEDGEMENTS.contains(&r.utterance(&neutral).as_str()));
    }

    proptest! {
        #[test]
        fn judge_probability_is_monotone_in_gap(noise in 0.0f64..=1.0, a in -500.0f64..500.0, d in 0.0f64..300.0) {
            let lo = judge_win_probability(noise, a, 0.0, ELO_XI);
            let hi = judge_win_probability(noise, a + d, 0.0, ELO_XI);
            prop_assert!(hi >= lo - 1e-15);
            prop_assert!((0.0..=1.0).contains(&lo));
        }

        #[test]
        fn therapist_replays_identically(seed: u64, text in "[a-z ]{0,40}") {
            let t = SyntheticTherapist::new(&BackendConfig::synthetic_therapist(SkillVector::uniform(120.0, seed))).unwrap();
            let req = therapist_request(&text);
            prop_assert_eq!(t.utterance(&req), t.utterance(&req));
        }
    }
}
