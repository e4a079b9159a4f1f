//! Tabular policy over graded therapist replies, and held-out battle evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grpo::{log_softmax, sample_index};
use super::reward::RewardParams;
use super::PrefError;
use crate::backends::{
    BackendConfig, BackendError, ChatBackend, ChatMessage, ChatRequest, ChatResponse, ScriptReplay,
    SkillVector, SyntheticTherapist,
};
use crate::battle::judge_pair;
use crate::domain::{
    ClientProfile, CompetencyDimension, PositionOrder, Relation, SimulationScript,
};
use crate::hash::{derive_seed, Fnv1a};
use crate::lexicon;
use crate::par;
use crate::simulate::{run_session_with, SessionOptions};
use crate::tournament::JudgeContext;

/// Policy row used on turns that probe no local dimension.
pub const NEUTRAL_KEY: &str = "neutral";

/// Policy row for a client message.
pub fn key_for_message(message: &str) -> String {
    lexicon::probed_dimension(message)
        .filter(|d| d.is_local())
        .map_or_else(|| NEUTRAL_KEY.to_string(), |d| d.name().to_string())
}

/// Dimensions a reply under `key` is scored on.
pub fn key_dimensions(key: &str) -> Vec<CompetencyDimension> {
    match key.parse::<CompetencyDimension>() {
        Ok(d) if d.is_local() => vec![d],
        _ => CompetencyDimension::ALL.into_iter().filter(|d| !d.is_local()).collect(),
    }
}

/// Every policy key: neutral plus one per local dimension.
pub fn all_keys() -> Vec<String> {
    std::iter::once(NEUTRAL_KEY.to_string())
        .chain(CompetencyDimension::locals().map(|d| d.name().to_string()))
        .collect()
}

/// A training or evaluation prompt: one client message under one policy row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub client_id: String,
    pub key: String,
    pub context: String,
}

/// One neutral query and one per local dimension for every profile.
pub fn build_queries(profiles: &[ClientProfile]) -> Vec<Query> {
    profiles
        .iter()
        .flat_map(|p| {
            all_keys().into_iter().map(move |key| {
                let context = match key.parse::<CompetencyDimension>() {
                    Ok(d) => lexicon::trigger_sentence(d).to_string(),
                    Err(_) => format!("I keep coming back to {}.", p.topic.to_lowercase()),
                };
                Query { id: format!("{}/{key}", p.id), client_id: p.id.clone(), key, context }
            })
        })
        .collect()
}

/// Softmax rows over a shared ladder of skill levels; action `i` replies
/// like a synthetic therapist whose every skill equals `levels[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub levels: Vec<f64>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

/// Default skill ladder.
pub fn default_levels() -> Vec<f64> {
    (0..6).map(|i| f64::from(i) * 60.0).collect()
}

impl TabularPolicy {
    pub fn uniform(keys: impl IntoIterator<Item = String>, levels: Vec<f64>) -> Self {
        let n = levels.len();
        Self { rows: keys.into_iter().map(|k| (k, vec![0.0; n])).collect(), levels }
    }

    /// Uniform policy over every key with the default ladder.
    pub fn initial() -> Self {
        Self::uniform(all_keys(), default_levels())
    }

    pub fn actions(&self) -> usize {
        self.levels.len()
    }

    pub fn row(&self, key: &str) -> Result<&[f64], PrefError> {
        self.rows.get(key).map(Vec::as_slice).ok_or_else(|| PrefError::UnknownKey(key.to_string()))
    }

    pub fn probabilities(&self, key: &str) -> Result<Vec<f64>, PrefError> {
        Ok(log_softmax(self.row(key)?).into_iter().map(f64::exp).collect())
    }

    /// Highest-logit action, lowest index on ties.
    pub fn greedy(&self, key: &str) -> Result<usize, PrefError> {
        let row = self.row(key)?;
        Ok(row.iter().enumerate().fold(0, |best, (i, x)| if *x > row[best] { i } else { best }))
    }

    /// Expected skill level of the replies under `key`.
    pub fn expected_level(&self, key: &str) -> Result<f64, PrefError> {
        Ok(self.probabilities(key)?.iter().zip(&self.levels).map(|(p, l)| p * l).sum())
    }
}

fn therapist_at(level: f64, seed: u64) -> SyntheticTherapist {
    SyntheticTherapist::new(&BackendConfig::synthetic_therapist(SkillVector::uniform(level, seed)))
        .expect("skill is set")
}

/// The reply action `action` gives to a query.
pub fn action_text(policy: &TabularPolicy, query: &Query, action: usize, seed: u64) -> Result<String, PrefError> {
    let level = *policy.levels.get(action).ok_or(PrefError::UnknownAction { action, size: policy.actions() })?;
    let request = ChatRequest::new("policy", vec![ChatMessage::system("policy"), ChatMessage::user(query.context.clone())])
        .with_seed(derive_seed(seed, &query.id));
    Ok(therapist_at(level, seed).utterance(&request))
}

/// Reward-model score of an action, averaged over the key's dimensions.
pub fn rm_reward(rm: &RewardParams, policy: &TabularPolicy, query: &Query, action: usize, seed: u64) -> f64 {
    let Ok(text) = action_text(policy, query, action, seed) else {
        return f64::NEG_INFINITY;
    };
    let dims = key_dimensions(&query.key);
    dims.iter().map(|d| rm.score(&query.context, &text, *d)).sum::<f64>() / dims.len() as f64
}

/// A therapist backend that samples its skill level from the policy.
///
/// The sample depends on the policy seed and the conversation so far, not
/// on the model name, so two equal policies hold identical sessions.
#[derive(Debug, Clone)]
pub struct PolicyTherapist {
    pub policy: TabularPolicy,
    pub seed: u64,
}

impl ChatBackend for PolicyTherapist {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let mut req = request.clone();
        req.model_name = "policy".to_string();
        let key = key_for_message(req.last_user().unwrap_or_default());
        let row = self.policy.row(&key).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(Fnv1a::new().write_u64(self.seed).write_u64(req.fingerprint()).finish());
        let action = sample_index(&log_softmax(row), &mut rng);
        let text = therapist_at(self.policy.levels[action], self.seed).utterance(&req);
        Ok(ChatResponse::stop(text, 0, 1))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinLossTie {
    pub win: usize,
    pub loss: usize,
    pub tie: usize,
}

impl WinLossTie {
    fn add(&mut self, r: Relation) {
        match r {
            Relation::AWins => self.win += 1,
            Relation::BWins => self.loss += 1,
            Relation::Tie => self.tie += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.win + self.loss + self.tie
    }

    pub fn win_share(&self) -> f64 {
        self.win as f64 / self.total().max(1) as f64
    }

    pub fn loss_share(&self) -> f64 {
        self.loss as f64 / self.total().max(1) as f64
    }
}

/// Outcomes of the trained policy against its snapshot, from the trained side.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeldoutTally {
    pub per_dimension: BTreeMap<CompetencyDimension, WinLossTie>,
    pub comprehensive: WinLossTie,
    pub battles: usize,
}

/// Battle `after` against `before` on held-out clients in both orders.
pub fn heldout_battle_eval(
    before: &TabularPolicy,
    after: &TabularPolicy,
    heldout: &[(ClientProfile, SimulationScript)],
    training_clients: &BTreeSet<String>,
    ctx: &JudgeContext<'_>,
) -> Result<HeldoutTally, PrefError> {
    let overlap: Vec<String> =
        heldout.iter().map(|(p, _)| p.id.clone()).filter(|id| training_clients.contains(id)).collect();
    if !overlap.is_empty() {
        return Err(PrefError::Overlap(overlap));
    }
    if heldout.is_empty() {
        return Err(PrefError::Empty("held-out clients"));
    }
    let policy_seed = derive_seed(ctx.seed, "policy");
    let old = PolicyTherapist { policy: before.clone(), seed: policy_seed };
    let new = PolicyTherapist { policy: after.clone(), seed: policy_seed };
    let client = ScriptReplay::new(derive_seed(ctx.seed, "client"));
    let opts = SessionOptions::default();
    let results = par::map(ctx.parallelism, heldout, |(profile, script)| -> Result<Vec<Relation>, PrefError> {
        let seed = derive_seed(ctx.seed, &profile.id);
        let tb = run_session_with(&client, &old, "before", profile, script, &ctx.templates, seed, &opts)?;
        let ta = run_session_with(&client, &new, "after", profile, script, &ctx.templates, seed, &opts)?;
        let mut out = Vec::with_capacity(26);
        for order in [PositionOrder::AB, PositionOrder::BA] {
            let bseed = derive_seed(ctx.seed, &format!("heldout/{}/{order:?}", profile.id));
            let j = judge_pair(ctx.judge, &ctx.templates, &ctx.options, &ta, &tb, order, bseed, None)?;
            out.extend(CompetencyDimension::ALL.iter().map(|d| j.relation(*d).unwrap_or(Relation::Tie)));
            out.push(j.comprehensive);
        }
        Ok(out)
    });
    let mut tally = HeldoutTally::default();
    for rels in results {
        for battle in rels?.chunks(13) {
            for (d, r) in CompetencyDimension::ALL.iter().zip(battle) {
                tally.per_dimension.entry(*d).or_default().add(*r);
            }
            tally.comprehensive.add(battle[12]);
            tally.battles += 1;
        }
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battle::JudgeOptions;
    use crate::par::Parallelism;
    use crate::preflearn::grpo::{train_policy_grpo, GrpoConfig};
    use crate::simulate::PromptTemplates;
    use crate::synthcheck::{synthetic_clients, synthetic_profiles};

    fn clients(range: std::ops::Range<usize>) -> Vec<(ClientProfile, SimulationScript)> {
        synthetic_clients(range.end, 5).into_iter().skip(range.start).collect()
    }

    fn ctx(judge: &dyn ChatBackend) -> JudgeContext<'_> {
        JudgeContext {
            judge,
            judge_id: "synthetic".into(),
            templates: PromptTemplates::default(),
            options: JudgeOptions::default(),
            seed: 21,
            parallelism: Parallelism::new(0),
        }
    }

    #[test]
    fn queries_cover_every_key() {
        let q = build_queries(&synthetic_profiles(2, 1));
        assert_eq!(q.len(), 2 * all_keys().len());
        assert!(q.iter().all(|x| x.key == key_for_message(&x.context)));
    }

    #[test]
    fn higher_levels_carry_more_markers() {
        let policy = TabularPolicy::initial();
        let q = Query { id: "q".into(), client_id: "c".into(), key: "Crisis".into(), context: lexicon::trigger_sentence(CompetencyDimension::Crisis).into() };
        let count = |a| lexicon::count_markers(&action_text(&policy, &q, a, 3).unwrap(), CompetencyDimension::Crisis);
        assert_eq!(count(0), 0);
        assert!(count(5) >= 9);
    }

    #[test]
    fn identical_policies_tie() {
        let judge = crate::backends::SyntheticJudge::new(&BackendConfig { tie_margin: 1.0, ..BackendConfig::synthetic_judge(0.1, 4) }).unwrap();
        let p = TabularPolicy::initial();
        let tally = heldout_battle_eval(&p, &p, &clients(0..100), &BTreeSet::new(), &ctx(&judge)).unwrap();
        assert_eq!(tally.battles, 200);
        let c = tally.comprehensive;
        assert!((c.win as f64 - c.loss as f64).abs() / 200.0 < 0.1, "{c:?}");
    }

    #[test]
    fn overlap_is_rejected() {
        let judge = crate::backends::SyntheticJudge::new(&BackendConfig::synthetic_judge(0.1, 4)).unwrap();
        let p = TabularPolicy::initial();
        let held = clients(0..2);
        let train: BTreeSet<String> = [held[0].0.id.clone()].into();
        assert!(matches!(heldout_battle_eval(&p, &p, &held, &train, &ctx(&judge)), Err(PrefError::Overlap(_))));
    }

    #[test]
    fn trained_policy_wins_heldout() {
        let train = synthetic_profiles(20, 5);
        let queries = build_queries(&train);
        let initial = TabularPolicy::initial();
        // reward aligned with the judge: the skill level itself
        let reward = |q: &Query, a: usize| {
            let _ = q;
            initial.levels[a]
        };
        let run = train_policy_grpo(&initial, &reward, &queries, &GrpoConfig::default(), 8, Parallelism::new(0)).unwrap();
        let judge = crate::backends::SyntheticJudge::new(&BackendConfig::synthetic_judge(0.1, 4)).unwrap();
        let train_ids: BTreeSet<String> = train.iter().map(|p| p.id.clone()).collect();
        let held: Vec<_> = clients(20..120);
        let tally = heldout_battle_eval(&initial, &run.policy, &held, &train_ids, &ctx(&judge)).unwrap();
        assert_eq!(tally.battles, 200);
        assert!(run.policy.expected_level("Crisis").unwrap() > 250.0);
        assert!(tally.comprehensive.win_share() > 0.6, "{:?}", tally.comprehensive);
    }
}
