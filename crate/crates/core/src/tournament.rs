//! Swiss-system and round-robin scheduling of role-swapped battles.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::backends::ChatBackend;
use crate::battle::{distinct_n, judge_pair, BattleError, JudgeOptions};
use crate::domain::{BattleRecord, PositionOrder, Relation, SessionTranscript};
use crate::hash::{derive_seed, Fnv1a};
use crate::par::{self, Parallelism};
use crate::simulate::PromptTemplates;

/// Unordered model pair, stored with the smaller id first.
pub fn pair_key(x: &str, y: &str) -> (String, String) {
    if x <= y {
        (x.to_string(), y.to_string())
    } else {
        (y.to_string(), x.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelStanding {
    pub wins: f64,
    pub losses: f64,
    pub ties: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Standings {
    pub per_model: BTreeMap<String, ModelStanding>,
    pub played: BTreeSet<(String, String)>,
    #[serde(default)]
    pub byes: BTreeSet<String>,
}

impl Standings {
    pub fn new(models: &[String]) -> Self {
        Self {
            per_model: models.iter().map(|m| (m.clone(), ModelStanding::default())).collect(),
            ..Self::default()
        }
    }

    pub fn score(&self, model: &str) -> f64 {
        self.per_model.get(model).map_or(0.0, |s| s.score)
    }

    pub fn has_played(&self, x: &str, y: &str) -> bool {
        self.played.contains(&pair_key(x, y))
    }

    fn credit(&mut self, model: &str, y: f64, weight: f64) {
        let s = self.per_model.entry(model.to_string()).or_default();
        if y == 1.0 {
            s.wins += weight;
        } else if y == 0.0 {
            s.losses += weight;
        } else {
            s.ties += weight;
        }
        s.score = s.wins + 0.5 * s.ties;
    }

    fn credit_bye(&mut self, model: &str) {
        self.credit(model, 1.0, 1.0);
        self.byes.insert(model.to_string());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: u32,
    pub matches: Vec<(String, String)>,
    pub byes: Vec<String>,
    /// Matches that repeat an earlier pairing because no alternative was left.
    #[serde(default)]
    pub rematches: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TournamentError {
    #[error("a tournament needs at least two models, got {0}")]
    TooFewModels(usize),
    #[error("rounds and cases must be at least 1")]
    EmptySchedule,
    #[error("missing transcripts: {}", .0.iter().map(|(m, c)| format!("{m}/{c}")).collect::<Vec<_>>().join(", "))]
    MissingTranscripts(Vec<(String, String)>),
    #[error("duplicate transcript for {0}/{1}")]
    DuplicateTranscript(String, String),
}

fn tiebreak_key(seed: u64, round: u32, model: &str) -> u64 {
    Fnv1a::new().write_u64(seed).write_u64(u64::from(round)).write_str(model).finish()
}

/// Models sorted by score (descending), ties broken by a seeded hash.
pub fn seeded_order(standings: &Standings, models: &[String], round: u32, seed: u64) -> Vec<String> {
    let mut order: Vec<&String> = models.iter().collect();
    order.sort_by(|a, b| {
        standings
            .score(b)
            .total_cmp(&standings.score(a))
            .then_with(|| tiebreak_key(seed, round, a).cmp(&tiebreak_key(seed, round, b)))
            .then_with(|| a.cmp(b))
    });
    order.into_iter().cloned().collect()
}

/// Swiss pairing of an already sorted list.
///
/// Models are grouped by equal score from the top. Players floated down from
/// a higher group are paired first, each with the highest native of the
/// group it has not met. Natives then pair greedily: the leading player meets
/// the next one, and a candidate it has already met floats down instead. A
/// player left alone floats down too. If the list has odd length, the
/// lowest-placed model without an earlier bye sits out.
pub fn pair_sorted(sorted: &[String], standings: &Standings, round: u32) -> RoundPlan {
    let mut pool: Vec<String> = sorted.to_vec();
    let mut byes = Vec::new();
    if pool.len() % 2 == 1 {
        let idx = pool
            .iter()
            .rposition(|m| !standings.byes.contains(m))
            .unwrap_or(pool.len() - 1);
        byes.push(pool.remove(idx));
    }
    let rank: HashMap<&str, usize> = sorted.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for m in pool {
        match groups.last_mut() {
            Some(g) if standings.score(&g[0]) == standings.score(&m) => g.push(m),
            _ => groups.push(vec![m]),
        }
    }
    let mut matches = Vec::new();
    let mut floaters: Vec<String> = Vec::new();
    for group in groups {
        let mut natives = group;
        let mut next_floaters = Vec::new();
        for f in floaters.drain(..) {
            match natives.iter().position(|n| !standings.has_played(&f, n)) {
                Some(i) => matches.push((f, natives.remove(i))),
                None => next_floaters.push(f),
            }
        }
        let mut rest: std::collections::VecDeque<String> = natives.into();
        while let Some(x) = rest.pop_front() {
            loop {
                match rest.front() {
                    None => {
                        next_floaters.push(x);
                        break;
                    }
                    Some(y) if standings.has_played(&x, y) => {
                        let y = rest.pop_front().expect("front exists");
                        next_floaters.push(y);
                    }
                    Some(_) => {
                        let y = rest.pop_front().expect("front exists");
                        matches.push((x, y));
                        break;
                    }
                }
            }
        }
        next_floaters.sort_by_key(|m| rank[m.as_str()]);
        floaters = next_floaters;
    }
    // leftovers at the bottom: avoid rematches where possible, else allow them
    let mut rematches = Vec::new();
    while let Some(x) = (!floaters.is_empty()).then(|| floaters.remove(0)) {
        if floaters.is_empty() {
            break;
        }
        let i = floaters
            .iter()
            .position(|y| !standings.has_played(&x, y))
            .unwrap_or(0);
        let y = floaters.remove(i);
        if standings.has_played(&x, &y) {
            tracing::warn!(round, "rematch {x} vs {y}: no unplayed opponent left");
            rematches.push((x.clone(), y.clone()));
        }
        matches.push((x, y));
    }
    RoundPlan { round, matches, byes, rematches }
}

/// Pair one Swiss round.
pub fn swiss_pairing(
    standings: &Standings,
    models: &[String],
    round: u32,
    seed: u64,
) -> Result<RoundPlan, TournamentError> {
    if models.len() < 2 {
        return Err(TournamentError::TooFewModels(models.len()));
    }
    let sorted = seeded_order(standings, models, round, seed);
    Ok(pair_sorted(&sorted, standings, round))
}

/// Default number of Swiss rounds: `ceil(log2 N)`.
pub fn default_rounds(n_models: usize) -> u32 {
    if n_models <= 1 {
        return 0;
    }
    usize::BITS - (n_models - 1).leading_zeros()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Forecast {
    pub sessions: u64,
    pub dimension_battles: u64,
    /// Sessions played by a model that never sits out.
    pub per_model_sessions: u64,
}

/// Battle counts of a Swiss tournament, including role swaps.
pub fn plan_tournament(n_models: usize, rounds: u32, cases: usize) -> Forecast {
    let sessions = u64::from(rounds) * (n_models as u64 / 2) * cases as u64 * 2;
    Forecast {
        sessions,
        dimension_battles: sessions * 12,
        per_model_sessions: u64::from(rounds) * cases as u64 * 2,
    }
}

/// Battle counts of a full round robin.
pub fn plan_round_robin(n_models: usize, cases: usize) -> Forecast {
    let n = n_models as u64;
    let sessions = n * n.saturating_sub(1) / 2 * cases as u64 * 2;
    Forecast {
        sessions,
        dimension_battles: sessions * 12,
        per_model_sessions: n.saturating_sub(1) * cases as u64 * 2,
    }
}

/// One judged comparison to run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledBattle {
    pub round: u32,
    pub model_a: String,
    pub model_b: String,
    pub client_id: String,
    pub order: PositionOrder,
}

impl ScheduledBattle {
    pub fn battle_id(&self) -> String {
        format!(
            "r{}-{}-vs-{}-{}-{:?}",
            self.round, self.model_a, self.model_b, self.client_id, self.order
        )
    }
}

/// Expand matches into per-case, per-order battles.
pub fn expand_matches(round: u32, matches: &[(String, String)], cases: &[String]) -> Vec<ScheduledBattle> {
    let mut out = Vec::with_capacity(matches.len() * cases.len() * 2);
    for (x, y) in matches {
        for c in cases {
            for order in [PositionOrder::AB, PositionOrder::BA] {
                out.push(ScheduledBattle {
                    round,
                    model_a: x.clone(),
                    model_b: y.clone(),
                    client_id: c.clone(),
                    order,
                });
            }
        }
    }
    out
}

/// Every unordered pair once, expanded per case and order, as round 1.
pub fn round_robin_schedule(
    models: &[String],
    cases: &[String],
) -> Result<Vec<ScheduledBattle>, TournamentError> {
    if models.len() < 2 {
        return Err(TournamentError::TooFewModels(models.len()));
    }
    let pairs: Vec<(String, String)> = models
        .iter()
        .enumerate()
        .flat_map(|(i, x)| models[i + 1..].iter().map(move |y| (x.clone(), y.clone())))
        .collect();
    Ok(expand_matches(1, &pairs, cases))
}

/// Transcripts indexed by (model, client), with cached Distinct-N scores.
#[derive(Debug, Clone, Default)]
pub struct TranscriptStore {
    index: HashMap<(String, String), usize>,
    transcripts: Vec<SessionTranscript>,
    diversity: Vec<Option<f64>>,
}

impl TranscriptStore {
    pub fn new(
        transcripts: Vec<SessionTranscript>,
        opts: &JudgeOptions,
        par: Parallelism,
    ) -> Result<Self, TournamentError> {
        let mut index = HashMap::with_capacity(transcripts.len());
        for (i, t) in transcripts.iter().enumerate() {
            if index.insert((t.model_id.clone(), t.client_id.clone()), i).is_some() {
                return Err(TournamentError::DuplicateTranscript(t.model_id.clone(), t.client_id.clone()));
            }
        }
        let diversity = par::map(par, &transcripts, |t| distinct_n(t, opts.distinct_n, opts.tokenizer).ok());
        Ok(Self { index, transcripts, diversity })
    }

    pub fn get(&self, model: &str, client: &str) -> Option<&SessionTranscript> {
        self.index.get(&(model.to_string(), client.to_string())).map(|&i| &self.transcripts[i])
    }

    fn diversity(&self, model: &str, client: &str) -> Option<f64> {
        self.index.get(&(model.to_string(), client.to_string())).and_then(|&i| self.diversity[i])
    }

    pub fn len(&self) -> usize {
        self.transcripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transcripts.is_empty()
    }

    pub fn transcripts(&self) -> &[SessionTranscript] {
        &self.transcripts
    }

    /// (model, client) pairs needed by `battles` that are not in the store.
    pub fn missing(&self, battles: &[ScheduledBattle]) -> Vec<(String, String)> {
        let mut gaps = BTreeSet::new();
        for b in battles {
            for m in [&b.model_a, &b.model_b] {
                if self.get(m, &b.client_id).is_none() {
                    gaps.insert((m.clone(), b.client_id.clone()));
                }
            }
        }
        gaps.into_iter().collect()
    }
}

/// Everything a battle needs besides the two transcripts.
pub struct JudgeContext<'a> {
    pub judge: &'a dyn ChatBackend,
    pub judge_id: String,
    pub templates: PromptTemplates,
    pub options: JudgeOptions,
    pub seed: u64,
    pub parallelism: Parallelism,
}

/// A battle excluded because it could not be judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BattleFailure {
    pub battle_id: String,
    pub error: String,
}

/// Logical timestamp of a round, so that records are reproducible.
pub fn round_timestamp(round: u32) -> String {
    let epoch: DateTime<Utc> = DateTime::from_timestamp(1_735_689_600, 0).unwrap_or_default();
    (epoch + Duration::seconds(i64::from(round))).to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Judge a list of scheduled battles in parallel. Output order follows input.
pub fn run_battles(
    battles: &[ScheduledBattle],
    store: &TranscriptStore,
    ctx: &JudgeContext<'_>,
) -> Result<(Vec<BattleRecord>, Vec<BattleFailure>), TournamentError> {
    let gaps = store.missing(battles);
    if !gaps.is_empty() {
        return Err(TournamentError::MissingTranscripts(gaps));
    }
    let results = par::map(ctx.parallelism, battles, |b| {
        let id = b.battle_id();
        let ta = store.get(&b.model_a, &b.client_id).expect("checked above");
        let tb = store.get(&b.model_b, &b.client_id).expect("checked above");
        let diversity = store
            .diversity(&b.model_a, &b.client_id)
            .zip(store.diversity(&b.model_b, &b.client_id));
        judge_pair(
            ctx.judge,
            &ctx.templates,
            &ctx.options,
            ta,
            tb,
            b.order,
            derive_seed(ctx.seed, &id),
            diversity,
        )
        .map(|judgment| BattleRecord {
            battle_id: id.clone(),
            round: b.round,
            client_id: b.client_id.clone(),
            model_a: b.model_a.clone(),
            model_b: b.model_b.clone(),
            position_order: b.order,
            judgment,
            judge_id: ctx.judge_id.clone(),
            timestamp: round_timestamp(b.round),
        })
        .map_err(|e: BattleError| BattleFailure { battle_id: id, error: e.to_string() })
    });
    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => {
                tracing::warn!(battle = %f.battle_id, "battle excluded: {}", f.error);
                failures.push(f);
            }
        }
    }
    Ok((records, failures))
}

/// Fold a round's records into the standings.
///
/// Per match, each case contributes equally and, within a case, each judged
/// order contributes equally, so a match hands out exactly 1.0 in total.
/// A bye is a free 1.0.
pub fn apply_round(standings: &mut Standings, plan: &RoundPlan, records: &[BattleRecord]) {
    let mut by_match: BTreeMap<(String, String), BTreeMap<&str, Vec<&BattleRecord>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.round == plan.round) {
        by_match
            .entry(pair_key(&r.model_a, &r.model_b))
            .or_default()
            .entry(r.client_id.as_str())
            .or_default()
            .push(r);
    }
    for (x, y) in &plan.matches {
        standings.played.insert(pair_key(x, y));
        let Some(cases) = by_match.get(&pair_key(x, y)) else {
            tracing::warn!(round = plan.round, "match {x} vs {y} has no judged battles");
            continue;
        };
        let case_weight = 1.0 / cases.len() as f64;
        for recs in cases.values() {
            let w = case_weight / recs.len() as f64;
            for r in recs {
                let y_a = r.judgment.comprehensive.y();
                standings.credit(&r.model_a, y_a, w);
                standings.credit(&r.model_b, 1.0 - y_a, w);
            }
        }
    }
    for b in &plan.byes {
        standings.credit_bye(b);
    }
}

/// Per-case match outcome for `x`: comprehensive y averaged over orders.
pub fn case_outcome(records: &[&BattleRecord], x: &str) -> Option<f64> {
    let ys: Vec<f64> = records
        .iter()
        .filter_map(|r| {
            if r.model_a == x {
                Some(r.judgment.comprehensive.y())
            } else if r.model_b == x {
                Some(1.0 - r.judgment.comprehensive.y())
            } else {
                None
            }
        })
        .collect();
    (!ys.is_empty()).then(|| ys.iter().sum::<f64>() / ys.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TournamentOutcome {
    pub records: Vec<BattleRecord>,
    pub failures: Vec<BattleFailure>,
    pub plans: Vec<RoundPlan>,
    pub standings: Standings,
}

impl TournamentOutcome {
    /// Records of rounds `1..=round`.
    pub fn records_through(&self, round: u32) -> Vec<BattleRecord> {
        self.records.iter().filter(|r| r.round <= round).cloned().collect()
    }
}

/// Run a full Swiss tournament over the stored transcripts.
pub fn run_swiss(
    models: &[String],
    store: &TranscriptStore,
    cases: &[String],
    rounds: u32,
    ctx: &JudgeContext<'_>,
) -> Result<TournamentOutcome, TournamentError> {
    if models.len() < 2 {
        return Err(TournamentError::TooFewModels(models.len()));
    }
    if rounds == 0 || cases.is_empty() {
        return Err(TournamentError::EmptySchedule);
    }
    let mut out = TournamentOutcome { standings: Standings::new(models), ..Default::default() };
    for round in 1..=rounds {
        let plan = swiss_pairing(&out.standings, models, round, ctx.seed)?;
        let battles = expand_matches(round, &plan.matches, cases);
        let (records, failures) = run_battles(&battles, store, ctx)?;
        apply_round(&mut out.standings, &plan, &records);
        out.records.extend(records);
        out.failures.extend(failures);
        out.plans.push(plan);
    }
    Ok(out)
}

/// Run the round-robin baseline over the stored transcripts.
pub fn run_round_robin(
    models: &[String],
    store: &TranscriptStore,
    cases: &[String],
    ctx: &JudgeContext<'_>,
) -> Result<TournamentOutcome, TournamentError> {
    if cases.is_empty() {
        return Err(TournamentError::EmptySchedule);
    }
    let battles = round_robin_schedule(models, cases)?;
    let (records, failures) = run_battles(&battles, store, ctx)?;
    let pairs: BTreeSet<(String, String)> =
        battles.iter().map(|b| (b.model_a.clone(), b.model_b.clone())).collect();
    let plan = RoundPlan { round: 1, matches: pairs.into_iter().collect(), byes: vec![], rematches: vec![] };
    let mut standings = Standings::new(models);
    apply_round(&mut standings, &plan, &records);
    Ok(TournamentOutcome { records, failures, plans: vec![plan], standings })
}

/// Comprehensive relation seen from `model`, if it took part.
pub fn relation_for(record: &BattleRecord, model: &str) -> Option<Relation> {
    if record.model_a == model {
        Some(record.judgment.comprehensive)
    } else if record.model_b == model {
        Some(record.judgment.comprehensive.flip())
    } else {
        None
    }
}
