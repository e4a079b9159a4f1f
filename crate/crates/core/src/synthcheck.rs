//! Recovery experiments: synthetic agents with known skills run through the
//! full pipeline, and the fitted ratings are compared with the latent ones.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendConfig, Backend, SkillVector};
use crate::battle::JudgeOptions;
use crate::domain::{default_script, ClientProfile, CompetencyDimension, SimulationScript, DEFAULT_TOTAL_TURNS};
use crate::hash::derive_seed;
use crate::par::Parallelism;
use crate::rating::{fit_elo, FitConfig, RatingError, RatingTable};
use crate::simulate::{run_campaign, CampaignConfig, CampaignError};
use crate::stats::{kendall_tau_b, spearman};
use crate::tournament::{
    default_rounds, plan_round_robin, plan_tournament, run_round_robin, run_swiss, Forecast, JudgeContext,
    TournamentError, TournamentOutcome, TranscriptStore,
};
use crate::ELO_BASELINE;

const NAMES: &[&str] = &["Mira", "Jon", "Ada", "Kofi", "Lena", "Ravi", "Tess", "Omar", "Yuki", "Ines", "Pavel", "Noor"];
const TOPICS: &[(&str, &str)] = &[
    ("Interpersonal relations", "Conflict with a close friend"),
    ("Family", "Pressure from parents"),
    ("Study and work", "Exam anxiety"),
    ("Self-growth", "Low self-worth"),
    ("Romance", "A recent breakup"),
    ("Emotional distress", "Persistent low mood"),
];
const DRIVES: &[&str] = &[
    "Fear that any flaw means failure.",
    "Need to be accepted by everyone.",
    "Wish to stay in control.",
    "Longing to be seen as competent.",
];
const EMOTIONS: &[&str] = &["Confusion", "Fear", "Shame", "Anger", "Sadness", "Guilt"];

/// A deterministic set of valid client profiles with ids `c000`, `c001`, ...
pub fn synthetic_profiles(n: usize, seed: u64) -> Vec<ClientProfile> {
    (0..n)
        .map(|i| {
            let id = format!("c{i:03}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &id));
            let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| xs.choose(rng).copied().unwrap_or_default().to_string();
            let (topic, subtopic) = TOPICS[rng.random_range(0..TOPICS.len())];
            ClientProfile {
                name: pick(&mut rng, NAMES),
                gender: pick(&mut rng, &["Female", "Male", "Nonbinary"]),
                age: rng.random_range(14..60).to_string(),
                occupation: pick(&mut rng, &["Student", "Nurse", "Engineer", "Teacher", "Clerk"]),
                topic: topic.to_string(),
                subtopic: subtopic.to_string(),
                personality: vec![pick(&mut rng, &["Self-critical", "Guarded", "Talkative", "Anxious"])],
                situation: format!("Struggling with {} lately.", subtopic.to_lowercase()),
                event_context: "During a quiet evening at home.".into(),
                emotional_words: vec![pick(&mut rng, EMOTIONS), pick(&mut rng, EMOTIONS)],
                core_drive: pick(&mut rng, DRIVES),
                reaction_pattern: "Withdraws when stressed.".into(),
                social_support: vec![pick(&mut rng, &["Older cousin", "Roommate", "Coach", "None"])],
                formative_experiences: vec!["A harsh remark from a teacher at 10.".into()],
                interests_values: "Music; honesty.".into(),
                id,
            }
        })
        .collect()
}

/// Profiles paired with their default scripts.
pub fn synthetic_clients(n: usize, seed: u64) -> Vec<(ClientProfile, SimulationScript)> {
    synthetic_profiles(n, seed)
        .into_iter()
        .map(|p| {
            let s = default_script(&p, DEFAULT_TOTAL_TURNS).expect("default length is long enough");
            (p, s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMember {
    pub model_id: String,
    /// Latent comprehensive skill.
    pub latent: f64,
    pub skill: SkillVector,
    pub config: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("a pool needs at least two models, got {0}")]
    PoolTooSmall(usize),
    #[error("cases must be at least 1")]
    NoCases,
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error(transparent)]
    Tournament(#[from] TournamentError),
    #[error(transparent)]
    Rating(#[from] RatingError),
    #[error("backend: {0}")]
    Backend(String),
}

/// Models `m00..` with latent skills `baseline + k * spacing` and
/// per-dimension skills perturbed uniformly within ±10.
pub fn generate_pool(n_models: usize, spacing: f64, seed: u64) -> Result<Vec<PoolMember>, SynthError> {
    if n_models < 2 {
        return Err(SynthError::PoolTooSmall(n_models));
    }
    Ok((0..n_models)
        .map(|k| {
            let model_id = format!("m{k:02}");
            let latent = ELO_BASELINE + k as f64 * spacing;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("skill/{model_id}")));
            let skill = SkillVector {
                per_dimension: CompetencyDimension::ALL
                    .into_iter()
                    .map(|d| (d, latent + rng.random_range(-10.0..=10.0)))
                    .collect(),
                seed: derive_seed(seed, &format!("therapist/{model_id}")),
            };
            let config = BackendConfig::synthetic_therapist(skill.clone());
            PoolMember { model_id, latent, skill, config }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Swiss,
    #[serde(rename = "roundrobin")]
    RoundRobin,
    Both,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "swiss" => Ok(Self::Swiss),
            "roundrobin" | "round-robin" => Ok(Self::RoundRobin),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown mode {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub mode: Mode,
    /// Swiss rounds; `None` uses `ceil(log2 N)`.
    pub rounds: Option<u32>,
    pub cases: usize,
    pub noise: f64,
    pub seed: u64,
    pub workers: usize,
    pub fit: FitConfig,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self { mode: Mode::Both, rounds: None, cases: 100, noise: 0.1, seed: 0, workers: 0, fit: FitConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSnapshot {
    pub round: u32,
    pub ratings: BTreeMap<String, f64>,
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub table: RatingTable,
    pub spearman: f64,
    pub sessions: u64,
    pub failures: usize,
    pub forecast: Forecast,
    pub per_model_sessions: BTreeMap<String, u64>,
    pub snapshots: Vec<RoundSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub seed: u64,
    pub swiss: Option<ModeResult>,
    pub round_robin: Option<ModeResult>,
    /// Kendall tau between the two modes' rankings, when both ran.
    pub kendall_tau: Option<f64>,
}

fn spearman_vs_latent(pool: &[PoolMember], ratings: &BTreeMap<String, f64>) -> f64 {
    let (fitted, latent): (Vec<f64>, Vec<f64>) = pool
        .iter()
        .filter_map(|m| ratings.get(&m.model_id).map(|r| (*r, m.latent)))
        .unzip();
    spearman(&fitted, &latent).unwrap_or(0.0)
}

fn summarize(
    pool: &[PoolMember],
    outcome: &TournamentOutcome,
    fit: &FitConfig,
    forecast: Forecast,
) -> Result<ModeResult, SynthError> {
    let table = fit_elo(&outcome.records, fit, None)?;
    let mut per_model: BTreeMap<String, u64> = pool.iter().map(|m| (m.model_id.clone(), 0)).collect();
    for r in &outcome.records {
        *per_model.entry(r.model_a.clone()).or_default() += 1;
        *per_model.entry(r.model_b.clone()).or_default() += 1;
    }
    let rounds = outcome.plans.iter().map(|p| p.round).max().unwrap_or(0);
    let mut snapshots = Vec::new();
    if rounds > 1 {
        for round in 1..=rounds {
            let t = fit_elo(&outcome.records_through(round), fit, None)?;
            snapshots.push(RoundSnapshot { round, spearman: spearman_vs_latent(pool, &t.ratings), ratings: t.ratings });
        }
    }
    Ok(ModeResult {
        spearman: spearman_vs_latent(pool, &table.ratings),
        table,
        sessions: outcome.records.len() as u64,
        failures: outcome.failures.len(),
        forecast,
        per_model_sessions: per_model,
        snapshots,
    })
}

/// Simulate every model on every case once, then run the requested
/// schedules over the shared transcripts and score the recovered ratings.
pub fn recovery_experiment(pool: &[PoolMember], config: &RecoveryConfig) -> Result<RecoveryReport, SynthError> {
    if pool.len() < 2 {
        return Err(SynthError::PoolTooSmall(pool.len()));
    }
    if config.cases == 0 {
        return Err(SynthError::NoCases);
    }
    let clients = synthetic_clients(config.cases, derive_seed(config.seed, "clients"));
    let models: Vec<(String, BackendConfig)> = pool.iter().map(|m| (m.model_id.clone(), m.config.clone())).collect();
    let campaign = CampaignConfig {
        campaign_seed: derive_seed(config.seed, "campaign"),
        client_backend: BackendConfig::script_replay(derive_seed(config.seed, "client")),
        templates: Default::default(),
        options: Default::default(),
        workers: config.workers,
    };
    let sim = run_campaign(&models, &clients, &campaign)?;
    let judge_opts = JudgeOptions::default();
    let par = Parallelism::new(config.workers);
    let store = TranscriptStore::new(sim.transcripts, &judge_opts, par)?;
    let judge = Backend::from_config(&BackendConfig::synthetic_judge(config.noise, derive_seed(config.seed, "judge")))
        .map_err(|e| SynthError::Backend(e.to_string()))?;
    let ctx = JudgeContext {
        judge: &judge,
        judge_id: "synthetic-judge".into(),
        templates: campaign.templates.clone(),
        options: judge_opts,
        seed: derive_seed(config.seed, "tournament"),
        parallelism: par,
    };
    let ids: Vec<String> = pool.iter().map(|m| m.model_id.clone()).collect();
    let cases: Vec<String> = clients.iter().map(|(p, _)| p.id.clone()).collect();
    let rounds = config.rounds.unwrap_or_else(|| default_rounds(ids.len()));
    let swiss = match config.mode {
        Mode::Swiss | Mode::Both => {
            let out = run_swiss(&ids, &store, &cases, rounds, &ctx)?;
            Some(summarize(pool, &out, &config.fit, plan_tournament(ids.len(), rounds, cases.len()))?)
        }
        Mode::RoundRobin => None,
    };
    let round_robin = match config.mode {
        Mode::RoundRobin | Mode::Both => {
            let out = run_round_robin(&ids, &store, &cases, &ctx)?;
            Some(summarize(pool, &out, &config.fit, plan_round_robin(ids.len(), cases.len()))?)
        }
        Mode::Swiss => None,
    };
    let kendall_tau = match (&swiss, &round_robin) {
        (Some(s), Some(r)) => {
            let (x, y): (Vec<f64>, Vec<f64>) =
                ids.iter().map(|m| (s.table.ratings[m], r.table.ratings[m])).unzip();
            kendall_tau_b(&x, &y)
        }
        _ => None,
    };
    Ok(RecoveryReport { seed: config.seed, swiss, round_robin, kendall_tau })
}

/// Convergence data as CSV: one row per (seed, mode, round) plus final rows.
pub fn reports_to_csv(reports: &[RecoveryReport]) -> String {
    let mut out = String::from("seed,mode,round,spearman,kendall_tau,sessions,forecast_sessions\n");
    for r in reports {
        let tau = r.kendall_tau.map_or_else(String::new, |t| format!("{t:.6}"));
        for (name, res) in [("swiss", &r.swiss), ("roundrobin", &r.round_robin)] {
            let Some(res) = res else { continue };
            for s in &res.snapshots {
                let _ = writeln!(out, "{},{name},{},{:.6},,,", r.seed, s.round, s.spearman);
            }
            let _ = writeln!(
                out,
                "{},{name},final,{:.6},{tau},{},{}",
                r.seed, res.spearman, res.sessions, res.forecast.sessions
            );
        }
    }
    out
}
