//! Bradley-Terry Elo fitting by full-batch gradient descent, plus battle statistics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{BattleRecord, CompetencyDimension, Relation};
use crate::par::{self, Parallelism};
use crate::{ELO_BASELINE, ELO_XI};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub xi: f64,
    pub baseline: f64,
    /// Step size as a fraction of the inverse curvature bound.
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Ridge weight on `((r - baseline) / xi)^2`.
    pub ridge: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            xi: ELO_XI,
            baseline: ELO_BASELINE,
            learning_rate: 1.0,
            max_iters: 10_000,
            grad_tol: 1e-8,
            ridge: 1e-4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), RatingError> {
        let ok = self.xi > 0.0
            && self.baseline.is_finite()
            && self.learning_rate > 0.0
            && self.learning_rate < 2.0
            && self.max_iters > 0
            && self.grad_tol > 0.0
            && self.ridge >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(RatingError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RatingError {
    #[error("invalid fit config: {0}")]
    Config(String),
    #[error("no battles to fit{}", .0.map(|d| format!(" for {d}")).unwrap_or_default())]
    EmptyData(Option<CompetencyDimension>),
    #[error("model {0} has no battles")]
    NoBattles(String),
    #[error("non-finite loss at iteration {0}")]
    NonFinite(usize),
    #[error("model {0} missing from ratings")]
    UnknownModel(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTable {
    /// `None` for the comprehensive table.
    pub dimension: Option<CompetencyDimension>,
    pub ratings: BTreeMap<String, f64>,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub final_nll: f64,
}

impl RatingTable {
    pub fn mean(&self) -> f64 {
        self.ratings.values().sum::<f64>() / self.ratings.len().max(1) as f64
    }

    /// Models by rating, highest first, name as tiebreak.
    pub fn ranking(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> = self.ratings.iter().map(|(m, r)| (m.as_str(), *r)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn converged(&self, config: &FitConfig) -> bool {
        self.final_grad_norm < config.grad_tol
    }
}

/// One scored comparison: `y` is 1 when `a` wins, 0.5 on a tie.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub a: String,
    pub b: String,
    pub y: f64,
}

impl Outcome {
    pub fn new(a: impl Into<String>, b: impl Into<String>, y: f64) -> Self {
        Self { a: a.into(), b: b.into(), y }
    }
}

/// Outcomes for one dimension (or the comprehensive relation).
pub fn outcomes(records: &[BattleRecord], dimension: Option<CompetencyDimension>) -> Vec<Outcome> {
    records
        .iter()
        .filter_map(|r| {
            r.judgment
                .relation_for(dimension)
                .map(|rel| Outcome::new(r.model_a.clone(), r.model_b.clone(), rel.y()))
        })
        .collect()
}

/// `P(a beats b)` under the logistic Elo model.
pub fn win_prob(r_a: f64, r_b: f64, xi: f64) -> f64 {
    1.0 / (1.0 + (-(r_a - r_b) / xi).exp())
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Penalized negative log-likelihood.
pub fn bt_nll(
    ratings: &BTreeMap<String, f64>,
    outcomes: &[Outcome],
    xi: f64,
    lambda: f64,
    baseline: f64,
) -> Result<f64, RatingError> {
    let get = |m: &str| ratings.get(m).copied().ok_or_else(|| RatingError::UnknownModel(m.to_string()));
    let mut nll = 0.0;
    for o in outcomes {
        let z = (get(&o.a)? - get(&o.b)?) / xi;
        // -ln P = softplus(-z), -ln(1-P) = softplus(z)
        nll += o.y * softplus(-z) + (1.0 - o.y) * softplus(z);
    }
    let ridge: f64 = ratings.values().map(|r| ((r - baseline) / xi).powi(2)).sum();
    Ok(nll + lambda * ridge)
}

/// Outcomes aggregated per ordered pair: (i, j, count, sum of y).
struct Aggregate {
    models: Vec<String>,
    pairs: Vec<(usize, usize, f64, f64)>,
    max_degree: f64,
}

impl Aggregate {
    fn build(outcomes: &[Outcome]) -> Self {
        let models: Vec<String> = outcomes
            .iter()
            .flat_map(|o| [o.a.clone(), o.b.clone()])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let idx = |m: &str| models.binary_search_by(|x| x.as_str().cmp(m)).expect("model indexed");
        let mut acc: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
        let mut degree = vec![0.0; models.len()];
        for o in outcomes {
            let (i, j) = (idx(&o.a), idx(&o.b));
            let e = acc.entry((i, j)).or_default();
            e.0 += 1.0;
            e.1 += o.y;
            degree[i] += 1.0;
            degree[j] += 1.0;
        }
        let pairs = acc.into_iter().map(|((i, j), (n, s))| (i, j, n, s)).collect();
        let max_degree = degree.into_iter().fold(0.0, f64::max);
        Self { models, pairs, max_degree }
    }

    fn loss_and_grad(&self, r: &[f64], cfg: &FitConfig, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut nll = 0.0;
        for &(i, j, n, s) in &self.pairs {
            let z = (r[i] - r[j]) / cfg.xi;
            nll += s * softplus(-z) + (n - s) * softplus(z);
            let p = 1.0 / (1.0 + (-z).exp());
            let g = (n * p - s) / cfg.xi;
            grad[i] += g;
            grad[j] -= g;
        }
        let xi2 = cfg.xi * cfg.xi;
        for (g, ri) in grad.iter_mut().zip(r) {
            let d = ri - cfg.baseline;
            nll += cfg.ridge * d * d / xi2;
            *g += 2.0 * cfg.ridge * d / xi2;
        }
        nll
    }
}

/// Fit ratings to outcomes. `trace` sees the ratings after every update.
pub fn fit_outcomes_traced(
    outcomes: &[Outcome],
    config: &FitConfig,
    dimension: Option<CompetencyDimension>,
    trace: &mut dyn FnMut(usize, &[f64]),
) -> Result<RatingTable, RatingError> {
    config.validate()?;
    if outcomes.is_empty() {
        return Err(RatingError::EmptyData(dimension));
    }
    let agg = Aggregate::build(outcomes);
    let n = agg.models.len();
    let xi2 = config.xi * config.xi;
    let lipschitz = 0.5 * agg.max_degree / xi2 + 2.0 * config.ridge / xi2;
    let step = config.learning_rate / lipschitz;
    let mut r = vec![config.baseline; n];
    let mut grad = vec![0.0; n];
    let mut nll = agg.loss_and_grad(&r, config, &mut grad);
    let norm = |g: &[f64]| g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut gnorm = norm(&grad);
    let mut iterations = 0;
    while gnorm >= config.grad_tol && iterations < config.max_iters {
        for (ri, gi) in r.iter_mut().zip(&grad) {
            *ri -= step * gi;
        }
        iterations += 1;
        trace(iterations, &r);
        nll = agg.loss_and_grad(&r, config, &mut grad);
        if !nll.is_finite() {
            return Err(RatingError::NonFinite(iterations));
        }
        gnorm = norm(&grad);
    }
    if gnorm >= config.grad_tol {
        tracing::warn!(?dimension, gnorm, iterations, "rating fit stopped before convergence");
    }
    Ok(RatingTable {
        dimension,
        ratings: agg.models.into_iter().zip(r).collect(),
        iterations,
        final_grad_norm: gnorm,
        final_nll: nll,
    })
}

pub fn fit_outcomes(
    outcomes: &[Outcome],
    config: &FitConfig,
    dimension: Option<CompetencyDimension>,
) -> Result<RatingTable, RatingError> {
    fit_outcomes_traced(outcomes, config, dimension, &mut |_, _| {})
}

/// Fit one table from battle records, filtered to `dimension` or the comprehensive relation.
pub fn fit_elo(
    records: &[BattleRecord],
    config: &FitConfig,
    dimension: Option<CompetencyDimension>,
) -> Result<RatingTable, RatingError> {
    fit_outcomes(&outcomes(records, dimension), config, dimension)
}

/// The comprehensive table followed by one table per dimension.
pub fn fit_all_dimensions(
    records: &[BattleRecord],
    config: &FitConfig,
    par: Parallelism,
) -> Result<Vec<RatingTable>, RatingError> {
    let targets: Vec<Option<CompetencyDimension>> =
        std::iter::once(None).chain(CompetencyDimension::ALL.into_iter().map(Some)).collect();
    par::map(par, &targets, |d| fit_elo(records, config, *d)).into_iter().collect()
}

/// `(wins + ties / 2) / battles` for `model` over comprehensive relations.
pub fn win_rate(records: &[BattleRecord], model: &str) -> Result<f64, RatingError> {
    let (mut score, mut n) = (0.0, 0usize);
    for r in records {
        let y = r.judgment.comprehensive.y();
        if r.model_a == model {
            score += y;
        } else if r.model_b == model {
            score += 1.0 - y;
        } else {
            continue;
        }
        n += 1;
    }
    if n == 0 {
        return Err(RatingError::NoBattles(model.to_string()));
    }
    Ok(score / n as f64)
}

/// Whether one side won every one of the 12 dimensions.
pub fn is_one_sided(record: &BattleRecord) -> bool {
    let rels: Vec<Option<Relation>> =
        CompetencyDimension::ALL.iter().map(|d| record.judgment.relation(*d)).collect();
    [Relation::AWins, Relation::BWins].iter().any(|side| rels.iter().all(|r| *r == Some(*side)))
}

/// Fraction of one-sided battles per unordered model pair.
pub fn one_sided_rate(records: &[BattleRecord]) -> BTreeMap<(String, String), f64> {
    let mut acc: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(crate::tournament::pair_key(&r.model_a, &r.model_b)).or_default();
        e.0 += usize::from(is_one_sided(r));
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (hit, n))| (k, hit as f64 / n as f64)).collect()
}

/// Fraction of one-sided battles over all records.
pub fn one_sided_overall(records: &[BattleRecord]) -> Option<f64> {
    (!records.is_empty())
        .then(|| records.iter().filter(|r| is_one_sided(r)).count() as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DimensionVerdict, Judgment, PositionOrder};
    use proptest::prelude::*;

    fn repeat(a: &str, b: &str, y: f64, k: usize) -> Vec<Outcome> {
        (0..k).map(|_| Outcome::new(a, b, y)).collect()
    }

    fn two_player(p_wins: usize, losses: usize, ridge: f64) -> RatingTable {
        let mut o = repeat("A", "B", 1.0, p_wins);
        o.extend(repeat("A", "B", 0.0, losses));
        fit_outcomes(&o, &FitConfig { ridge, ..FitConfig::default() }, None).unwrap()
    }

    fn gap(t: &RatingTable) -> f64 {
        t.ratings["A"] - t.ratings["B"]
    }

    #[test]
    fn win_prob_closed_forms() {
        assert_eq!(win_prob(100.0, 100.0, ELO_XI), 0.5);
        assert!((win_prob(500.0, 100.0, ELO_XI) - 10.0 / 11.0).abs() < 1e-12);
        assert!((win_prob(143.0, 138.0, ELO_XI) - 0.507_195_081_7).abs() < 1e-9);
    }

    #[test]
    fn nll_plug_in_values() {
        let even: BTreeMap<String, f64> = [("A".into(), 100.0), ("B".into(), 100.0)].into();
        let tie = [Outcome::new("A", "B", 0.5)];
        assert!((bt_nll(&even, &tie, ELO_XI, 0.0, 100.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        let g = ELO_XI * 3f64.ln();
        let apart: BTreeMap<String, f64> = [("A".into(), 100.0 + g), ("B".into(), 100.0)].into();
        let win = [Outcome::new("A", "B", 1.0)];
        assert!((bt_nll(&apart, &win, ELO_XI, 0.0, 100.0).unwrap() + 0.75f64.ln()).abs() < 1e-12);
        assert_eq!(bt_nll(&even, &[], ELO_XI, 0.0, 100.0).unwrap(), 0.0);
        assert!(bt_nll(&even, &[Outcome::new("A", "C", 1.0)], ELO_XI, 0.0, 100.0).is_err());
    }

    #[test]
    fn two_player_mle_gap() {
        let t = two_player(3, 1, 1e-4);
        assert!(t.converged(&FitConfig::default()));
        assert!((gap(&t) - ELO_XI * 3f64.ln()).abs() < 1.0, "gap {}", gap(&t));
        let exact = two_player(3, 1, 0.0);
        assert!((gap(&exact) - 190.848).abs() < 1e-3);
        assert!((exact.ratings["A"] - 195.424).abs() < 1e-3);
    }

    #[test]
    fn symmetric_data_stays_at_baseline() {
        let mut ties = repeat("A", "B", 0.5, 3);
        ties.extend(repeat("B", "C", 0.5, 2));
        let t = fit_outcomes(&ties, &FitConfig::default(), None).unwrap();
        assert!(t.ratings.values().all(|r| (r - 100.0).abs() < 1e-9));
        let mut cycle = repeat("A", "B", 1.0, 4);
        cycle.extend(repeat("B", "C", 1.0, 4));
        cycle.extend(repeat("C", "A", 1.0, 4));
        let t = fit_outcomes(&cycle, &FitConfig::default(), None).unwrap();
        assert!(t.ratings.values().all(|r| (r - 100.0).abs() < 1e-9));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(fit_outcomes(&[], &FitConfig::default(), None), Err(RatingError::EmptyData(None)));
        let bad = FitConfig { xi: 0.0, ..FitConfig::default() };
        assert!(matches!(fit_outcomes(&repeat("A", "B", 1.0, 1), &bad, None), Err(RatingError::Config(_))));
    }

    #[test]
    fn mean_is_preserved_every_iteration() {
        let mut o = repeat("A", "B", 1.0, 7);
        o.extend(repeat("B", "C", 1.0, 5));
        o.extend(repeat("C", "D", 0.5, 3));
        o.extend(repeat("D", "A", 0.0, 2));
        let mut worst = 0.0f64;
        let t = fit_outcomes_traced(&o, &FitConfig::default(), None, &mut |_, r| {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            worst = worst.max((m - 100.0).abs());
        })
        .unwrap();
        assert!(worst < 1e-9, "drift {worst}");
        assert!(t.iterations > 0);
    }

    #[test]
    fn shift_leaves_unpenalized_nll_unchanged() {
        let o = vec![Outcome::new("A", "B", 1.0), Outcome::new("B", "C", 0.5), Outcome::new("C", "A", 0.0)];
        let base: BTreeMap<String, f64> = [("A".into(), 130.0), ("B".into(), 90.0), ("C".into(), 80.0)].into();
        let shifted: BTreeMap<String, f64> = base.iter().map(|(k, v)| (k.clone(), v + 57.5)).collect();
        let a = bt_nll(&base, &o, ELO_XI, 0.0, 100.0).unwrap();
        let b = bt_nll(&shifted, &o, ELO_XI, 0.0, 100.0).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(bt_nll(&shifted, &o, ELO_XI, 1e-4, 100.0).unwrap() > b);
    }

    #[test]
    fn gap_increases_with_win_fraction() {
        let gaps: Vec<f64> = [11, 13, 15, 17, 19].iter().map(|w| gap(&two_player(*w, 20 - w, 1e-4))).collect();
        assert!(gaps.windows(2).all(|w| w[1] > w[0]), "{gaps:?}");
    }

    fn rec(a: &str, b: &str, rels: [Relation; 12], comp: Relation) -> BattleRecord {
        BattleRecord {
            battle_id: format!("{a}{b}"),
            round: 1,
            client_id: "c".into(),
            model_a: a.into(),
            model_b: b.into(),
            position_order: PositionOrder::AB,
            judgment: Judgment {
                per_dimension: CompetencyDimension::ALL
                    .iter()
                    .zip(rels)
                    .map(|(d, r)| (*d, DimensionVerdict { relation: r, rationale: String::new() }))
                    .collect(),
                comprehensive: comp,
            },
            judge_id: "j".into(),
            timestamp: String::new(),
        }
    }

    #[test]
    fn win_rate_counts() {
        use Relation::*;
        let mk = |rels: &[(Relation, usize)]| -> Vec<BattleRecord> {
            rels.iter().flat_map(|(r, k)| (0..*k).map(|_| rec("A", "B", [*r; 12], *r))).collect()
        };
        assert_eq!(win_rate(&mk(&[(AWins, 3), (BWins, 1)]), "A").unwrap(), 0.75);
        assert_eq!(win_rate(&mk(&[(Tie, 4)]), "A").unwrap(), 0.5);
        assert_eq!(win_rate(&mk(&[(AWins, 1), (BWins, 1), (Tie, 2)]), "A").unwrap(), 0.5);
        assert_eq!(win_rate(&mk(&[(AWins, 3), (BWins, 1)]), "B").unwrap(), 0.25);
        assert!(win_rate(&mk(&[(Tie, 1)]), "Z").is_err());
    }

    #[test]
    fn one_sided_definition() {
        use Relation::*;
        assert!(is_one_sided(&rec("A", "B", [AWins; 12], AWins)));
        assert!(is_one_sided(&rec("A", "B", [BWins; 12], BWins)));
        let mut almost = [AWins; 12];
        almost[5] = Tie;
        assert!(!is_one_sided(&rec("A", "B", almost, AWins)));
        let mut group: Vec<BattleRecord> = (0..3).map(|_| rec("A", "B", [AWins; 12], AWins)).collect();
        group.extend((0..7).map(|_| rec("B", "A", almost, AWins)));
        let rates = one_sided_rate(&group);
        assert!((rates[&("A".to_string(), "B".to_string())] - 0.3).abs() < 1e-12);
        assert_eq!(one_sided_overall(&group), Some(0.3));
    }

    #[test]
    fn per_dimension_tables_use_their_relation() {
        use Relation::*;
        let mut rels = [Tie; 12];
        rels[CompetencyDimension::Crisis.index()] = AWins;
        let recs: Vec<BattleRecord> = (0..4).map(|_| rec("A", "B", rels, BWins)).collect();
        let tables = fit_all_dimensions(&recs, &FitConfig::default(), Parallelism::SEQUENTIAL).unwrap();
        assert_eq!(tables.len(), 13);
        assert!(tables[0].ratings["A"] < tables[0].ratings["B"]);
        let crisis = tables.iter().find(|t| t.dimension == Some(CompetencyDimension::Crisis)).unwrap();
        assert!(crisis.ratings["A"] > crisis.ratings["B"]);
        let other = tables.iter().find(|t| t.dimension == Some(CompetencyDimension::Empathy)).unwrap();
        assert!((other.ratings["A"] - 100.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn fit_is_order_independent(
            raw in proptest::collection::vec((0usize..5, 0usize..5, 0u8..3), 1..60),
            rot in 0usize..60,
        ) {
            let o: Vec<Outcome> = raw
                .iter()
                .filter(|(a, b, _)| a != b)
                .map(|(a, b, y)| Outcome::new(format!("m{a}"), format!("m{b}"), f64::from(*y) / 2.0))
                .collect();
            prop_assume!(!o.is_empty());
            let mut p = o.clone();
            p.reverse();
            let k = rot % p.len();
            p.rotate_left(k);
            let cfg = FitConfig::default();
            let x = fit_outcomes(&o, &cfg, None).unwrap();
            let y = fit_outcomes(&p, &cfg, None).unwrap();
            for (m, r) in &x.ratings {
                prop_assert!((r - y.ratings[m]).abs() < 1e-9);
            }
            prop_assert!((x.mean() - 100.0).abs() < 1e-9);
        }

        #[test]
        fn gradient_sums_to_zero(
            raw in proptest::collection::vec((0usize..4, 0usize..4, 0u8..3), 1..30),
            shifts in proptest::collection::vec(-200.0f64..200.0, 4),
        ) {
            let o: Vec<Outcome> = raw
                .iter()
                .filter(|(a, b, _)| a != b)
                .map(|(a, b, y)| Outcome::new(format!("m{a}"), format!("m{b}"), f64::from(*y) / 2.0))
                .collect();
            prop_assume!(!o.is_empty());
            let agg = Aggregate::build(&o);
            let cfg = FitConfig::default();
            let mut r: Vec<f64> = shifts[..agg.models.len()].iter().map(|s| 100.0 + s).collect();
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            r.iter_mut().for_each(|x| *x += 100.0 - mean);
            let mut g = vec![0.0; r.len()];
            agg.loss_and_grad(&r, &cfg, &mut g);
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
