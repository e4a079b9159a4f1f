//! Calibration engine for conversational counseling agents.
//!
//! The crate runs scripted counseling sessions against pluggable chat
//! backends, stages stage-sliced pairwise battles in a Swiss-system
//! tournament, fits Bradley-Terry Elo ratings per competency dimension and
//! turns battle outcomes into preference data for a small reward model and a
//! GRPO-trained tabular policy.
//!
//! Data-parallel work (campaigns, battles, per-dimension fits, experiment
//! seeds) goes through [`par`], which uses rayon when the `parallel` feature
//! is enabled and falls back to plain iteration otherwise.

pub mod agreement;
pub mod backends;
pub mod battle;
pub mod domain;
pub mod hash;
pub mod io;
pub mod lexicon;
pub mod par;
pub mod preflearn;
pub mod rating;
pub mod report;
pub mod simulate;
pub mod stats;
pub mod synthcheck;
pub mod tournament;

/// Logistic scale of the Elo link, `400 / ln 10`.
pub const ELO_XI: f64 = 400.0 / std::f64::consts::LN_10;

/// Rating every model starts from and the fitted mean is anchored to.
pub const ELO_BASELINE: f64 = 100.0;
