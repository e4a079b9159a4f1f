//! Run configuration loaded from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use counsel_arena::backends::BackendConfig;
use counsel_arena::hash::derive_seed;
use counsel_arena::preflearn::{GrpoConfig, RmTrainConfig};
use counsel_arena::rating::FitConfig;
use counsel_arena::synthcheck::Mode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    /// Worker threads, `0` for all cores and `1` for sequential runs.
    pub workers: usize,
    pub backends: Backends,
    pub simulation: Simulation,
    pub tournament: Tournament,
    pub rating: FitConfig,
    pub preflearn: Preflearn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backends {
    pub client: BackendConfig,
    pub judge: BackendConfig,
    pub judge_id: String,
    pub models: BTreeMap<String, BackendConfig>,
}

impl Default for Backends {
    fn default() -> Self {
        Self {
            client: BackendConfig::script_replay(0),
            judge: BackendConfig::synthetic_judge(0.1, 0),
            judge_id: "judge".into(),
            models: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Simulation {
    /// Client profiles, JSONL.
    pub profiles: Option<PathBuf>,
    /// Scripts, JSONL; clients without one get the default script.
    pub scripts: Option<PathBuf>,
    /// Prompt templates, JSON.
    pub templates: Option<PathBuf>,
    pub history_window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tournament {
    pub mode: Mode,
    /// Swiss rounds; unset means `ceil(log2 N)`.
    pub rounds: Option<u32>,
}

impl Default for Tournament {
    fn default() -> Self {
        Self { mode: Mode::Swiss, rounds: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preflearn {
    pub rm: RmTrainConfig,
    pub grpo: GrpoConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.simulation.profiles, &mut cfg.simulation.scripts, &mut cfg.simulation.templates]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            root: self.seed,
            campaign: derive_seed(self.seed, "campaign"),
            client: derive_seed(self.seed, "client"),
            judge: derive_seed(self.seed, "judge"),
            tournament: derive_seed(self.seed, "tournament"),
            rm: derive_seed(self.seed, "rm"),
            grpo: derive_seed(self.seed, "grpo"),
            heldout: derive_seed(self.seed, "heldout"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub root: u64,
    pub campaign: u64,
    pub client: u64,
    pub judge: u64,
    pub tournament: u64,
    pub rm: u64,
    pub grpo: u64,
    pub heldout: u64,
}

#[derive(Debug, Serialize)]
struct EffectiveBody<'a> {
    command: &'a str,
    argv: &'a [String],
    config: &'a Config,
    seeds: Seeds,
}

#[derive(Debug, Serialize)]
struct EffectiveRecord<'a> {
    #[serde(flatten)]
    body: EffectiveBody<'a>,
    sha256: String,
}

/// Write `<dir>/<command>.effective-config.json` and return its digest.
pub fn write_effective(dir: &Path, command: &str, argv: &[String], config: &Config) -> anyhow::Result<String> {
    let body = EffectiveBody { command, argv, config, seeds: config.seeds() };
    let canonical = serde_json::to_vec(&body)?;
    let sha256 = hex::encode(Sha256::digest(&canonical));
    let record = EffectiveRecord { body, sha256: sha256.clone() };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{command}.effective-config.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&record)?).with_context(|| format!("writing {}", path.display()))?;
    tracing::info!(digest = %sha256, path = %path.display(), "effective config");
    Ok(sha256)
}
