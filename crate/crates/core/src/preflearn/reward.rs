//! Preference pairs and the pairwise logistic reward model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{features, FEATURE_DIM};
use super::{sigmoid, softplus, PrefError};
use crate::domain::{BattleRecord, CompetencyDimension, Relation, SessionTranscript};
use crate::tournament::TranscriptStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub dimension: CompetencyDimension,
    pub context: String,
    pub winner: String,
    pub loser: String,
    pub source_battle: String,
}

fn response_for(t: &SessionTranscript, dim: CompetencyDimension, turn: Option<usize>) -> String {
    match (dim.is_local(), turn) {
        (true, Some(i)) => t.turns[i].therapist_utterance.clone(),
        _ => t.turns.iter().map(|x| x.therapist_utterance.as_str()).collect::<Vec<_>>().join("\n"),
    }
}

/// One pair per decisive dimension relation of every battle.
///
/// Local dimensions compare the two therapist replies at the first turn
/// that probes the dimension; global dimensions compare whole sessions.
pub fn extract_preferences(
    records: &[BattleRecord],
    store: &TranscriptStore,
) -> Result<Vec<PreferencePair>, PrefError> {
    let mut pairs = Vec::new();
    for r in records {
        let fetch = |model: &str| {
            store.get(model, &r.client_id).ok_or_else(|| PrefError::MissingTranscript {
                battle: r.battle_id.clone(),
                model: model.to_string(),
                client: r.client_id.clone(),
            })
        };
        let (ta, tb) = (fetch(&r.model_a)?, fetch(&r.model_b)?);
        for (dim, verdict) in &r.judgment.per_dimension {
            let (win, lose) = match verdict.relation {
                Relation::Tie => continue,
                Relation::AWins => (ta, tb),
                Relation::BWins => (tb, ta),
            };
            let turn = if dim.is_local() {
                let i = ta
                    .turns
                    .iter()
                    .position(|t| t.triggered_dimension == Some(*dim))
                    .filter(|i| *i < tb.turns.len())
                    .ok_or_else(|| PrefError::MissingTrigger { battle: r.battle_id.clone(), dimension: *dim })?;
                Some(i)
            } else {
                None
            };
            let context = ta.turns.get(turn.unwrap_or(0)).map(|t| t.client_utterance.clone()).unwrap_or_default();
            let (winner, loser) = (response_for(win, *dim, turn), response_for(lose, *dim, turn));
            if winner == loser {
                continue;
            }
            pairs.push(PreferencePair { dimension: *dim, context, winner, loser, source_battle: r.battle_id.clone() });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub weights: Vec<f64>,
    pub feature_dim: usize,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self { weights: vec![0.0; FEATURE_DIM], feature_dim: FEATURE_DIM }
    }
}

impl RewardParams {
    pub fn score(&self, context: &str, response: &str, dim: CompetencyDimension) -> f64 {
        dot(&self.weights, &features(context, response, dim))
    }

    /// `r(o_w) - r(o_l)` for a pair.
    pub fn margin(&self, pair: &PreferencePair) -> f64 {
        self.score(&pair.context, &pair.winner, pair.dimension)
            - self.score(&pair.context, &pair.loser, pair.dimension)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn feature_diff(pair: &PreferencePair) -> Vec<f64> {
    let w = features(&pair.context, &pair.winner, pair.dimension);
    let l = features(&pair.context, &pair.loser, pair.dimension);
    w.iter().zip(&l).map(|(a, b)| a - b).collect()
}

/// `-ln σ(r_w - r_l)`.
pub fn rm_loss(params: &RewardParams, pair: &PreferencePair) -> f64 {
    softplus(-params.margin(pair))
}

/// Loss and its gradient in the weights.
pub fn rm_loss_grad(params: &RewardParams, pair: &PreferencePair) -> (f64, Vec<f64>) {
    let diff = feature_diff(pair);
    let m = dot(&params.weights, &diff);
    let s = sigmoid(-m);
    (softplus(-m), diff.iter().map(|d| -s * d).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmTrainConfig {
    /// Step as a fraction of the inverse curvature bound.
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1.0, epochs: 500, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmReport {
    pub params: RewardParams,
    pub final_loss: f64,
    /// Pairs ranked correctly, ties counted as one half.
    pub accuracy: f64,
    pub loss_per_epoch: Vec<f64>,
}

/// Share of pairs whose winner scores higher; exact ties count one half.
pub fn pairwise_accuracy(params: &RewardParams, pairs: &[PreferencePair]) -> f64 {
    let hits: f64 = pairs
        .iter()
        .map(|p| {
            let m = params.margin(p);
            if m.abs() <= 1e-12 {
                0.5
            } else if m > 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    hits / pairs.len().max(1) as f64
}

/// Full-batch gradient descent on the mean pair loss, in coordinates
/// rescaled so every feature difference lies in `[-1, 1]`.
pub fn train_rm(pairs: &[PreferencePair], config: &RmTrainConfig) -> Result<RmReport, PrefError> {
    if pairs.is_empty() {
        return Err(PrefError::Empty("preference pairs"));
    }
    if config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
        return Err(PrefError::Config(format!("learning_rate {}", config.learning_rate)));
    }
    let diffs: Vec<Vec<f64>> = pairs.iter().map(feature_diff).collect();
    let mut scale = vec![0.0f64; FEATURE_DIM];
    for d in &diffs {
        for (s, x) in scale.iter_mut().zip(d) {
            *s = s.max(x.abs());
        }
    }
    scale.iter_mut().filter(|s| **s == 0.0).for_each(|s| *s = 1.0);
    let z: Vec<Vec<f64>> = diffs.iter().map(|d| d.iter().zip(&scale).map(|(x, s)| x / s).collect()).collect();
    let max_sq = z.iter().map(|v| dot(v, v)).fold(0.0, f64::max).max(1e-12);
    let step = config.learning_rate / (0.25 * max_sq);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.random_range(-1e-3..1e-3)).collect();
    let n = pairs.len() as f64;
    let loss_grad = |w: &[f64], g: &mut [f64]| {
        g.iter_mut().for_each(|x| *x = 0.0);
        let mut loss = 0.0;
        for v in &z {
            let m = dot(w, v);
            loss += softplus(-m);
            let s = sigmoid(-m);
            for (gi, vi) in g.iter_mut().zip(v) {
                *gi -= s * vi / n;
            }
        }
        loss / n
    };
    let mut g = vec![0.0; FEATURE_DIM];
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let loss = loss_grad(&w, &mut g);
        if !loss.is_finite() {
            return Err(PrefError::NonFinite { what: "reward loss", step: epoch });
        }
        history.push(loss);
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= step * gi;
        }
    }
    let final_loss = loss_grad(&w, &mut g);
    let params = RewardParams { weights: w.iter().zip(&scale).map(|(x, s)| x / s).collect(), feature_dim: FEATURE_DIM };
    let accuracy = pairwise_accuracy(&params, pairs);
    Ok(RmReport { params, final_loss, accuracy, loss_per_epoch: history })
}
