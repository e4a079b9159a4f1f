//! Subcommand implementations. Every stage reads and writes files only.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use counsel_arena::agreement::{cohens_kappa, paired_labels, position_share, swap_consistency};
use counsel_arena::backends::{Backend, BackendConfig, BackendKind};
use counsel_arena::battle::JudgeOptions;
use counsel_arena::domain::{
    default_script, validate_profiles, validate_script, BattleRecord, ClientProfile, CompetencyDimension,
    SessionTranscript, SimulationScript, DEFAULT_TOTAL_TURNS,
};
use counsel_arena::hash::derive_seed;
use counsel_arena::io::{read_jsonl, write_jsonl};
use counsel_arena::par::{self, Parallelism};
use counsel_arena::preflearn::{
    build_queries, extract_preferences, heldout_battle_eval, rm_reward, train_policy_grpo, train_rm, PreferencePair,
    Query, RewardParams, TabularPolicy,
};
use counsel_arena::rating::{fit_all_dimensions, fit_elo, RatingTable};
use counsel_arena::report::emit_report;
use counsel_arena::simulate::{run_campaign, CampaignConfig, PromptTemplates, SessionOptions};
use counsel_arena::synthcheck::{
    generate_pool, recovery_experiment, reports_to_csv, synthetic_profiles, Mode, RecoveryConfig,
};
use counsel_arena::tournament::{
    default_rounds, run_round_robin, run_swiss, JudgeContext, TournamentOutcome, TranscriptStore,
};
use serde::{de::DeserializeOwned, Serialize};

use crate::config::{write_effective, Config};
use crate::{Cli, Command};

pub fn run(cli: &Cli, argv: &[String]) -> anyhow::Result<()> {
    let mut cfg = Config::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.global.workers {
        cfg.workers = workers;
    }
    let record = |dir: &Path| write_effective(dir, cli.command.name(), argv, &cfg).map(|_| ());
    match &cli.command {
        Command::Simulate { out } => {
            record(&dir_of(out))?;
            simulate(&cfg, out)
        }
        Command::Tournament { transcripts, models, rounds, cases, mode, out, standings } => {
            record(&dir_of(out))?;
            let standings = standings.clone().unwrap_or_else(|| dir_of(out).join("standings.jsonl"));
            tournament(&cfg, transcripts, models, *rounds, cases.as_deref(), *mode, out, &standings)
        }
        Command::Rate { battles, out, dimension } => {
            record(&dir_of(out))?;
            rate(&cfg, battles, out, *dimension)
        }
        Command::Report { ratings, battles, format, out } => {
            if let Some(out) = out {
                record(&dir_of(out))?;
            }
            let tables: Vec<RatingTable> = read(ratings)?;
            let records: Option<Vec<BattleRecord>> = battles.as_deref().map(read).transpose()?;
            let text = emit_report(&tables, records.as_deref(), *format)?;
            match out {
                Some(path) => write_text(path, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Agree { battles_x, battles_y, out } => {
            record(&dir_of(out))?;
            agree(battles_x, battles_y, out)
        }
        Command::Bias { battles, out } => {
            if let Some(out) = out {
                record(&dir_of(out))?;
            }
            bias(battles, out.as_deref())
        }
        Command::Prefs { battles, transcripts, out } => {
            record(&dir_of(out))?;
            let records: Vec<BattleRecord> = read(battles)?;
            let store = store(&cfg, read(transcripts)?)?;
            let pairs = extract_preferences(&records, &store)?;
            tracing::info!(pairs = pairs.len(), battles = records.len(), "preferences extracted");
            write_records(out, &pairs)
        }
        Command::TrainRm { pairs, out } => {
            record(&dir_of(out))?;
            let pairs: Vec<PreferencePair> = read(pairs)?;
            let rm_cfg = counsel_arena::preflearn::RmTrainConfig { seed: cfg.seeds().rm, ..cfg.preflearn.rm };
            let report = train_rm(&pairs, &rm_cfg)?;
            eprintln!("pairs {} final loss {:.6} accuracy {:.4}", pairs.len(), report.final_loss, report.accuracy);
            write_json(out, &report.params)
        }
        Command::Grpo { rm, queries, init, snapshot, out } => {
            record(&dir_of(out))?;
            grpo(&cfg, rm, queries, init.as_deref(), snapshot.as_deref(), out)
        }
        Command::EvalHeldout { before, after, queries, train_queries, out } => {
            if let Some(out) = out {
                record(&dir_of(out))?;
            }
            eval_heldout(&cfg, before, after, queries, train_queries.as_deref(), out.as_deref())
        }
        Command::Validate { script, profiles } => validate(script, profiles),
        Command::Synthcheck { mode, models, spacing, rounds, cases, noise, seeds, out } => {
            record(&dir_of(out))?;
            let recovery = RecoveryConfig {
                mode: *mode,
                rounds: *rounds,
                cases: *cases,
                noise: *noise,
                seed: cfg.seed,
                workers: cfg.workers,
                fit: cfg.rating,
            };
            synthcheck(&recovery, *models, *spacing, *seeds, out)
        }
        Command::Gen { models, clients, spacing, id_offset, out } => {
            record(out)?;
            generate(&cfg, *models, *clients, *spacing, *id_offset, out)
        }
    }
}

fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn read<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    Ok(read_jsonl(path)?)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    let dir = dir_of(path);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    ensure_parent(path)?;
    Ok(write_jsonl(path, records)?)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

/// `<path>.errors.jsonl`, next to `path`.
fn errors_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".errors.jsonl");
    PathBuf::from(s)
}

fn seeded(config: &BackendConfig, seed: u64) -> BackendConfig {
    match config.kind {
        BackendKind::RemoteHttp => config.clone(),
        _ => BackendConfig { seed, ..config.clone() },
    }
}

fn judge(cfg: &Config) -> anyhow::Result<Backend> {
    Ok(Backend::from_config(&seeded(&cfg.backends.judge, cfg.seeds().judge))?)
}

fn templates(cfg: &Config) -> anyhow::Result<PromptTemplates> {
    let templates = match &cfg.simulation.templates {
        Some(path) => read_json(path)?,
        None => PromptTemplates::default(),
    };
    templates.validate()?;
    Ok(templates)
}

fn store(cfg: &Config, transcripts: Vec<SessionTranscript>) -> anyhow::Result<TranscriptStore> {
    Ok(TranscriptStore::new(transcripts, &JudgeOptions::default(), Parallelism::new(cfg.workers))?)
}

fn context<'a>(cfg: &Config, judge: &'a Backend) -> anyhow::Result<JudgeContext<'a>> {
    Ok(JudgeContext {
        judge,
        judge_id: cfg.backends.judge_id.clone(),
        templates: templates(cfg)?,
        options: JudgeOptions::default(),
        seed: cfg.seeds().tournament,
        parallelism: Parallelism::new(cfg.workers),
    })
}

/// Pair each profile with its script, generating default scripts for the rest.
fn clients(
    profiles: Vec<ClientProfile>,
    scripts: Option<&Path>,
) -> anyhow::Result<Vec<(ClientProfile, SimulationScript)>> {
    let mut by_client: HashMap<String, SimulationScript> = match scripts {
        Some(path) => read::<SimulationScript>(path)?.into_iter().map(|s| (s.client_id.clone(), s)).collect(),
        None => HashMap::new(),
    };
    profiles
        .into_iter()
        .map(|p| {
            let script = match by_client.remove(&p.id) {
                Some(s) => s,
                None => default_script(&p, DEFAULT_TOTAL_TURNS)?,
            };
            Ok((p, script))
        })
        .collect()
}

fn simulate(cfg: &Config, out: &Path) -> anyhow::Result<()> {
    let profiles_path = cfg.simulation.profiles.as_deref().context("simulation.profiles is not set")?;
    ensure!(!cfg.backends.models.is_empty(), "backends.models is empty");
    let clients = clients(read(profiles_path)?, cfg.simulation.scripts.as_deref())?;
    let seeds = cfg.seeds();
    let mut options = SessionOptions::default();
    if let Some(h) = cfg.simulation.history_window {
        options.history_window = h;
    }
    let campaign = CampaignConfig {
        campaign_seed: seeds.campaign,
        client_backend: seeded(&cfg.backends.client, seeds.client),
        templates: templates(cfg)?,
        options,
        workers: cfg.workers,
    };
    let models: Vec<(String, BackendConfig)> =
        cfg.backends.models.iter().map(|(id, c)| (id.clone(), c.clone())).collect();
    let result = run_campaign(&models, &clients, &campaign)?;
    write_records(out, &result.transcripts)?;
    if !result.failures.is_empty() {
        let path = errors_path(out);
        write_records(&path, &result.failures)?;
        tracing::warn!(failures = result.failures.len(), path = %path.display(), "some sessions failed");
    }
    eprintln!("{} transcripts, {} failures", result.transcripts.len(), result.failures.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn tournament(
    cfg: &Config,
    transcripts: &Path,
    models: &[String],
    rounds: Option<u32>,
    cases: Option<&Path>,
    mode: Option<Mode>,
    out: &Path,
    standings_out: &Path,
) -> anyhow::Result<()> {
    let transcripts: Vec<SessionTranscript> = read(transcripts)?;
    let models: Vec<String> = if models.is_empty() {
        transcripts.iter().map(|t| t.model_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        models.to_vec()
    };
    let cases: Vec<String> = match cases {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        None => shared_clients(&transcripts, &models),
    };
    ensure!(!cases.is_empty(), "no client is covered by every model");
    let store = store(cfg, transcripts)?;
    let judge = judge(cfg)?;
    let ctx = context(cfg, &judge)?;
    let outcome: TournamentOutcome = match mode.unwrap_or(cfg.tournament.mode) {
        Mode::Swiss => {
            let rounds = rounds.or(cfg.tournament.rounds).unwrap_or_else(|| default_rounds(models.len()));
            run_swiss(&models, &store, &cases, rounds, &ctx)?
        }
        Mode::RoundRobin => run_round_robin(&models, &store, &cases, &ctx)?,
        Mode::Both => bail!("tournament mode must be swiss or roundrobin"),
    };
    for plan in &outcome.plans {
        for (x, y) in &plan.rematches {
            tracing::warn!(round = plan.round, "forced rematch {x} vs {y}");
        }
    }
    write_records(out, &outcome.records)?;
    if !outcome.failures.is_empty() {
        write_records(&errors_path(out), &outcome.failures)?;
    }
    let rows: Vec<StandingRow> = outcome
        .standings
        .per_model
        .iter()
        .map(|(model, s)| StandingRow {
            model: model.clone(),
            score: s.score,
            wins: s.wins,
            losses: s.losses,
            ties: s.ties,
            bye: outcome.standings.byes.contains(model),
        })
        .collect();
    write_records(standings_out, &rows)?;
    eprintln!(
        "{} battles over {} rounds, {} failures",
        outcome.records.len(),
        outcome.plans.len(),
        outcome.failures.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct StandingRow {
    model: String,
    score: f64,
    wins: f64,
    losses: f64,
    ties: f64,
    bye: bool,
}

fn shared_clients(transcripts: &[SessionTranscript], models: &[String]) -> Vec<String> {
    let mut per_client: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for t in transcripts {
        per_client.entry(&t.client_id).or_default().insert(&t.model_id);
    }
    per_client
        .into_iter()
        .filter(|(_, have)| models.iter().all(|m| have.contains(m.as_str())))
        .map(|(c, _)| c.to_string())
        .collect()
}

fn rate(cfg: &Config, battles: &Path, out: &Path, dimension: Option<CompetencyDimension>) -> anyhow::Result<()> {
    let records: Vec<BattleRecord> = read(battles)?;
    ensure!(!records.is_empty(), "{} holds no battles", battles.display());
    let tables = match dimension {
        Some(d) => vec![fit_elo(&records, &cfg.rating, Some(d))?],
        None => fit_all_dimensions(&records, &cfg.rating, Parallelism::new(cfg.workers))?,
    };
    write_records(out, &tables)
}

fn agree(x: &Path, y: &Path, out: &Path) -> anyhow::Result<()> {
    let (xs, ys): (Vec<BattleRecord>, Vec<BattleRecord>) = (read(x)?, read(y)?);
    let mut csv = String::from("dimension,paired,kappa\n");
    let targets = std::iter::once(None).chain(CompetencyDimension::ALL.into_iter().map(Some));
    let mut any = false;
    for dim in targets {
        let (lx, ly) = paired_labels(&xs, &ys, dim);
        any |= !lx.is_empty();
        let kappa = cohens_kappa(&lx, &ly).map_or_else(|_| String::new(), |k| format!("{k:.6}"));
        let name = dim.map_or("Comprehensive", |d| d.name());
        let _ = writeln!(csv, "{name},{},{kappa}", lx.len());
    }
    ensure!(any, "the two battle files share no battle ids");
    write_text(out, &csv)
}

#[derive(Debug, Serialize)]
struct BiasSummary {
    battles: usize,
    first: f64,
    second: f64,
    tie: f64,
    consistent_pairs: usize,
    pairs: usize,
    consistency: f64,
}

fn bias(battles: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let records: Vec<BattleRecord> = read(battles)?;
    let share = position_share(&records)?;
    let swap = swap_consistency(&records)?;
    let summary = BiasSummary {
        battles: records.len(),
        first: share.first,
        second: share.second,
        tie: share.tie,
        consistent_pairs: swap.consistent,
        pairs: swap.pairs,
        consistency: swap.fraction(),
    };
    println!(
        "position shares first {:.4} second {:.4} tie {:.4} over {} battles",
        summary.first, summary.second, summary.tie, summary.battles
    );
    println!("swap consistency {}/{} ({:.4})", summary.consistent_pairs, summary.pairs, summary.consistency);
    match out {
        Some(path) => write_json(path, &summary),
        None => Ok(()),
    }
}

fn grpo(
    cfg: &Config,
    rm: &Path,
    queries: &Path,
    init: Option<&Path>,
    snapshot: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let rm: RewardParams = read_json(rm)?;
    let profiles: Vec<ClientProfile> = read(queries)?;
    let queries = build_queries(&profiles);
    let initial = match init {
        Some(path) => read_json(path)?,
        None => TabularPolicy::initial(),
    };
    if let Some(path) = snapshot {
        write_json(path, &initial)?;
    }
    let seeds = cfg.seeds();
    let par = Parallelism::new(cfg.workers);
    let units: Vec<(usize, usize)> =
        (0..queries.len()).flat_map(|q| (0..initial.actions()).map(move |a| (q, a))).collect();
    let scores = par::map(par, &units, |&(q, a)| rm_reward(&rm, &initial, &queries[q], a, seeds.grpo));
    let table: HashMap<(usize, usize), f64> = units.into_iter().zip(scores).collect();
    let index: HashMap<&str, usize> = queries.iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
    let reward = |q: &Query, a: usize| index.get(q.id.as_str()).and_then(|i| table.get(&(*i, a))).copied().unwrap_or(f64::NEG_INFINITY);
    let run = train_policy_grpo(&initial, &reward, &queries, &cfg.preflearn.grpo, seeds.grpo, par)?;
    let mut curve = String::from("epoch,mean_reward\n");
    for (i, r) in run.mean_reward_per_epoch.iter().enumerate() {
        let _ = writeln!(curve, "{},{r:.6}", i + 1);
    }
    let mut curve_path = out.as_os_str().to_owned();
    curve_path.push(".rewards.csv");
    write_text(Path::new(&curve_path), &curve)?;
    if let (Some(first), Some(last)) = (run.mean_reward_per_epoch.first(), run.mean_reward_per_epoch.last()) {
        eprintln!("{} queries, mean reward {first:.4} -> {last:.4}", queries.len());
    }
    write_json(out, &run.policy)
}

fn eval_heldout(
    cfg: &Config,
    before: &Path,
    after: &Path,
    queries: &Path,
    train_queries: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let before: TabularPolicy = read_json(before)?;
    let after: TabularPolicy = read_json(after)?;
    let heldout = clients(read(queries)?, cfg.simulation.scripts.as_deref())?;
    let training: BTreeSet<String> = match train_queries {
        Some(path) => read::<ClientProfile>(path)?.into_iter().map(|p| p.id).collect(),
        None => BTreeSet::new(),
    };
    let judge = judge(cfg)?;
    let ctx = JudgeContext { seed: cfg.seeds().heldout, ..context(cfg, &judge)? };
    let tally = heldout_battle_eval(&before, &after, &heldout, &training, &ctx)?;
    let c = tally.comprehensive;
    println!(
        "after vs before over {} battles: win {} loss {} tie {} (win share {:.3})",
        tally.battles,
        c.win,
        c.loss,
        c.tie,
        c.win_share()
    );
    for (dim, w) in &tally.per_dimension {
        println!("  {dim}: {}:{}:{}", w.win, w.loss, w.tie);
    }
    match out {
        Some(path) => write_json(path, &tally),
        None => Ok(()),
    }
}

fn validate(script: &Path, profiles: &Path) -> anyhow::Result<()> {
    let scripts: Vec<SimulationScript> = read(script)?;
    let profiles: Vec<ClientProfile> = read(profiles)?;
    let mut problems: Vec<String> = validate_profiles(&profiles).iter().map(ToString::to_string).collect();
    let by_id: HashMap<&str, &ClientProfile> = profiles.iter().map(|p| (p.id.as_str(), p)).collect();
    for s in &scripts {
        match by_id.get(s.client_id.as_str()) {
            Some(p) => problems.extend(
                validate_script(s, p).iter().map(|v| format!("script {}: {v}", s.client_id)),
            ),
            None => problems.push(format!("script {}: no profile with this client id", s.client_id)),
        }
    }
    for p in &problems {
        println!("{p}");
    }
    println!("{} violations", problems.len());
    ensure!(problems.is_empty(), "validation failed with {} violations", problems.len());
    Ok(())
}

fn synthcheck(base: &RecoveryConfig, models: usize, spacing: f64, seeds: u64, out: &Path) -> anyhow::Result<()> {
    ensure!(seeds > 0, "--seeds must be at least 1");
    let seed_list: Vec<u64> = (0..seeds).map(|k| derive_seed(base.seed, &format!("synthcheck/{k}"))).collect();
    // seeds run in parallel, each pipeline sequentially inside
    let inner = RecoveryConfig { workers: 1, ..base.clone() };
    let results = par::map(Parallelism::new(base.workers), &seed_list, |&seed| {
        let pool = generate_pool(models, spacing, seed)?;
        recovery_experiment(&pool, &RecoveryConfig { seed, ..inner.clone() })
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    for r in &reports {
        let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        eprintln!(
            "seed {}: swiss rho {} round-robin rho {} tau {}",
            r.seed,
            fmt(r.swiss.as_ref().map(|m| m.spearman)),
            fmt(r.round_robin.as_ref().map(|m| m.spearman)),
            fmt(r.kendall_tau)
        );
    }
    write_text(out, &reports_to_csv(&reports))
}

/// Keep seeds inside the signed range TOML integers can hold.
fn toml_seed(seed: u64) -> u64 {
    seed >> 1
}

fn generate(
    cfg: &Config,
    models: usize,
    clients_n: usize,
    spacing: f64,
    id_offset: usize,
    out: &Path,
) -> anyhow::Result<()> {
    ensure!(clients_n > 0, "--clients must be at least 1");
    let pool = generate_pool(models, spacing, cfg.seed)?;
    let mut profiles = synthetic_profiles(clients_n, derive_seed(cfg.seed, "profiles"));
    for (i, p) in profiles.iter_mut().enumerate() {
        p.id = format!("c{:03}", id_offset + i);
    }
    let scripts = profiles
        .iter()
        .map(|p| default_script(p, DEFAULT_TOTAL_TURNS))
        .collect::<Result<Vec<_>, _>>()?;
    write_records(&out.join("profiles.jsonl"), &profiles)?;
    write_records(&out.join("scripts.jsonl"), &scripts)?;
    let mut config = Config {
        seed: cfg.seed,
        workers: cfg.workers,
        ..Config::default()
    };
    config.simulation.profiles = Some("profiles.jsonl".into());
    config.simulation.scripts = Some("scripts.jsonl".into());
    for m in pool {
        let mut skill = m.skill;
        skill.seed = toml_seed(skill.seed);
        config.backends.models.insert(m.model_id, BackendConfig::synthetic_therapist(skill));
    }
    write_text(&out.join("config.toml"), &toml::to_string(&config)?)?;
    let latent: Vec<String> =
        (0..models).map(|k| format!("m{k:02}={}", counsel_arena::ELO_BASELINE + k as f64 * spacing)).collect();
    eprintln!("wrote {} profiles and {models} models ({})", clients_n, latent.join(" "));
    Ok(())
}
