//! Hand-specified feature map for the linear reward model.

use std::collections::BTreeSet;

use crate::battle::{distinct_n_of, Tokenizer};
use crate::domain::CompetencyDimension;
use crate::lexicon;

/// Features per dimension block.
pub const BASE_FEATURES: usize = 7;
/// One block per competency dimension.
pub const FEATURE_DIM: usize = BASE_FEATURES * 12;

/// Per-response features, averaged per line where counts are involved:
/// length, distinct-1, distinct-2, markers of `dim`, empathy markers,
/// engagement markers, and the share of words echoed from the context.
pub fn base_features(context: &str, response: &str, dim: CompetencyDimension) -> [f64; BASE_FEATURES] {
    let lines = response.lines().filter(|l| !l.trim().is_empty()).count().max(1) as f64;
    let words: Vec<String> = response.split_whitespace().map(lexicon::normalize).collect();
    let per_line = |d| lexicon::count_markers(response, d) as f64 / lines;
    let ctx: BTreeSet<String> = context.split_whitespace().map(lexicon::normalize).collect();
    let echoed = words.iter().filter(|w| !w.is_empty() && ctx.contains(*w)).count();
    [
        words.len() as f64 / lines / 10.0,
        distinct_n_of([response], 1, Tokenizer::Whitespace).unwrap_or(0.0),
        distinct_n_of([response], 2, Tokenizer::Whitespace).unwrap_or(0.0),
        per_line(dim),
        per_line(CompetencyDimension::Empathy),
        per_line(CompetencyDimension::Engagement),
        echoed as f64 / words.len().max(1) as f64,
    ]
}

/// Base features placed in the block of `dim`, zeros elsewhere.
pub fn features(context: &str, response: &str, dim: CompetencyDimension) -> Vec<f64> {
    let mut v = vec![0.0; FEATURE_DIM];
    let start = dim.index() * BASE_FEATURES;
    v[start..start + BASE_FEATURES].copy_from_slice(&base_features(context, response, dim));
    v
}
