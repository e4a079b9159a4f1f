//! Preference data from battles, a linear reward model and GRPO on a tabular policy.

pub mod bandit;
pub mod features;
pub mod grpo;
pub mod reward;

pub use bandit::{
    action_text, all_keys, build_queries, default_levels, heldout_battle_eval, key_for_message,
    rm_reward, HeldoutTally, PolicyTherapist, Query, TabularPolicy, WinLossTie, NEUTRAL_KEY,
};
pub use features::{base_features, features, BASE_FEATURES, FEATURE_DIM};
pub use grpo::{
    grpo_advantages, grpo_objective, train_policy_grpo, GroupSample, GrpoConfig, GrpoRun,
};
pub use reward::{
    extract_preferences, rm_loss, rm_loss_grad, train_rm, PreferencePair, RewardParams,
    RmReport, RmTrainConfig,
};

use crate::battle::BattleError;
use crate::domain::CompetencyDimension;
use crate::simulate::SessionError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PrefError {
    #[error("battle {battle}: no transcript for {model}/{client}")]
    MissingTranscript { battle: String, model: String, client: String },
    #[error("battle {battle}: no trigger turn for {dimension}")]
    MissingTrigger { battle: String, dimension: CompetencyDimension },
    #[error("no {0} to train on")]
    Empty(&'static str),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("held-out clients overlap training: {}", .0.join(", "))]
    Overlap(Vec<String>),
    #[error("action {action} outside a vocabulary of {size}")]
    UnknownAction { action: usize, size: usize },
    #[error("policy has no row for {0}")]
    UnknownKey(String),
    #[error("a group needs at least two samples with equal-length vectors")]
    MalformedGroup,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Battle(#[from] BattleError),
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
