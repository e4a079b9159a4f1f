//! Agreement between label sources and position-bias statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{BattleRecord, CompetencyDimension, PositionOrder, Relation};
use crate::tournament::pair_key;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgreementError {
    #[error("label lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no labels to compare")]
    Empty,
    #[error("kappa is undefined: both sources use one identical category but disagree")]
    UndefinedKappa,
    #[error("unpaired battles: {}", .0.join(", "))]
    Unpaired(Vec<String>),
}

const CATEGORIES: [Relation; 3] = [Relation::AWins, Relation::BWins, Relation::Tie];

fn category(r: Relation) -> usize {
    match r {
        Relation::AWins => 0,
        Relation::BWins => 1,
        Relation::Tie => 2,
    }
}

/// Cohen's kappa over the three relation categories.
pub fn cohens_kappa(x: &[Relation], y: &[Relation]) -> Result<f64, AgreementError> {
    if x.len() != y.len() {
        return Err(AgreementError::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(AgreementError::Empty);
    }
    let n = x.len() as f64;
    let mut mx = [0.0; 3];
    let mut my = [0.0; 3];
    let mut agree = 0.0;
    for (a, b) in x.iter().zip(y) {
        mx[category(*a)] += 1.0;
        my[category(*b)] += 1.0;
        if a == b {
            agree += 1.0;
        }
    }
    let p_o = agree / n;
    let p_e: f64 = (0..CATEGORIES.len()).map(|k| (mx[k] / n) * (my[k] / n)).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return if p_o == 1.0 { Ok(1.0) } else { Err(AgreementError::UndefinedKappa) };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Labels of battles present in both sets, joined by battle id.
pub fn paired_labels(
    x: &[BattleRecord],
    y: &[BattleRecord],
    dimension: Option<CompetencyDimension>,
) -> (Vec<Relation>, Vec<Relation>) {
    let ys: BTreeMap<&str, &BattleRecord> = y.iter().map(|r| (r.battle_id.as_str(), r)).collect();
    x.iter()
        .filter_map(|rx| {
            let ry = ys.get(rx.battle_id.as_str())?;
            Some((rx.judgment.relation_for(dimension)?, ry.judgment.relation_for(dimension)?))
        })
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionShare {
    pub first: f64,
    pub second: f64,
    pub tie: f64,
}

/// Shares of comprehensive outcomes won by the first-shown side, the second, or tied.
pub fn position_share(records: &[BattleRecord]) -> Result<PositionShare, AgreementError> {
    if records.is_empty() {
        return Err(AgreementError::Empty);
    }
    let mut counts = [0usize; 3];
    for r in records {
        counts[category(r.first_position_relation())] += 1;
    }
    let n = records.len() as f64;
    Ok(PositionShare {
        first: counts[0] as f64 / n,
        second: counts[1] as f64 / n,
        tie: counts[2] as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapConsistency {
    pub consistent: usize,
    pub pairs: usize,
}

impl SwapConsistency {
    pub fn fraction(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.consistent as f64 / self.pairs as f64
        }
    }
}

/// Whether both presentation orders of each (round, client, model pair) name the same winner.
pub fn swap_consistency(records: &[BattleRecord]) -> Result<SwapConsistency, AgreementError> {
    type Key = (u32, String, (String, String));
    let mut groups: BTreeMap<Key, Vec<&BattleRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.round, r.client_id.clone(), pair_key(&r.model_a, &r.model_b));
        groups.entry(key).or_default().push(r);
    }
    let mut orphans = Vec::new();
    let mut out = SwapConsistency { consistent: 0, pairs: 0 };
    for ((_, _, (lo, _)), recs) in &groups {
        let has = |o: PositionOrder| recs.iter().filter(|r| r.position_order == o).count() == 1;
        if recs.len() != 2 || !has(PositionOrder::AB) || !has(PositionOrder::BA) {
            orphans.extend(recs.iter().map(|r| r.battle_id.clone()));
            continue;
        }
        // orient both verdicts toward the same model
        let toward_lo = |r: &BattleRecord| {
            if &r.model_a == lo {
                r.judgment.comprehensive
            } else {
                r.judgment.comprehensive.flip()
            }
        };
        out.pairs += 1;
        if toward_lo(recs[0]) == toward_lo(recs[1]) {
            out.consistent += 1;
        }
    }
    if !orphans.is_empty() {
        return Err(AgreementError::Unpaired(orphans));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DimensionVerdict, Judgment};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use Relation::*;

    fn rec(id: &str, a: &str, b: &str, order: PositionOrder, comp: Relation) -> BattleRecord {
        BattleRecord {
            battle_id: id.into(),
            round: 1,
            client_id: "c".into(),
            model_a: a.into(),
            model_b: b.into(),
            position_order: order,
            judgment: Judgment {
                per_dimension: CompetencyDimension::ALL
                    .iter()
                    .map(|d| (*d, DimensionVerdict { relation: comp, rationale: String::new() }))
                    .collect(),
                comprehensive: comp,
            },
            judge_id: "j".into(),
            timestamp: String::new(),
        }
    }

    #[test]
    fn kappa_perfect_agreement() {
        let x = [AWins, BWins, Tie, AWins];
        assert_eq!(cohens_kappa(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn kappa_hand_computed_table() {
        // 4 agree on A, 4 agree on B, 1 A/B, 1 B/A: marginals 50/50
        let mut x = vec![AWins; 4];
        x.extend([BWins; 4]);
        x.extend([AWins, BWins]);
        let mut y = vec![AWins; 4];
        y.extend([BWins; 4]);
        y.extend([BWins, AWins]);
        assert!((cohens_kappa(&x, &y).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn kappa_near_zero_at_chance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<Relation> = (0..10_000).map(|_| CATEGORIES[rng.random_range(0..3)]).collect();
        let mut y = x.clone();
        y.shuffle(&mut rng);
        assert!(cohens_kappa(&x, &y).unwrap().abs() < 0.05);
    }

    #[test]
    fn kappa_degenerate_and_malformed() {
        assert_eq!(cohens_kappa(&[Tie, Tie], &[Tie, Tie]).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&[Tie], &[Tie, Tie]), Err(AgreementError::LengthMismatch(1, 2)));
        assert_eq!(cohens_kappa(&[], &[]), Err(AgreementError::Empty));
    }

    #[test]
    fn position_share_counts() {
        let all_first: Vec<BattleRecord> = (0..3)
            .map(|i| rec(&i.to_string(), "A", "B", PositionOrder::AB, AWins))
            .collect();
        let s = position_share(&all_first).unwrap();
        assert_eq!((s.first, s.second, s.tie), (1.0, 0.0, 0.0));
        let mixed = vec![
            rec("1", "A", "B", PositionOrder::AB, AWins),
            rec("2", "A", "B", PositionOrder::BA, BWins),
            rec("3", "A", "B", PositionOrder::BA, AWins),
            rec("4", "A", "B", PositionOrder::AB, Tie),
        ];
        let s = position_share(&mixed).unwrap();
        assert_eq!((s.first, s.second, s.tie), (0.5, 0.25, 0.25));
        assert!(position_share(&[]).is_err());
    }

    #[test]
    fn swap_consistency_cases() {
        let same = [
            rec("1", "A", "B", PositionOrder::AB, AWins),
            rec("2", "A", "B", PositionOrder::BA, AWins),
        ];
        assert_eq!(swap_consistency(&same).unwrap().fraction(), 1.0);
        let flip = [
            rec("1", "A", "B", PositionOrder::AB, AWins),
            rec("2", "A", "B", PositionOrder::BA, BWins),
        ];
        assert_eq!(swap_consistency(&flip).unwrap().fraction(), 0.0);
        let orphan = [rec("1", "A", "B", PositionOrder::AB, AWins)];
        assert_eq!(swap_consistency(&orphan), Err(AgreementError::Unpaired(vec!["1".into()])));
    }

    #[test]
    fn nine_of_ten_consistent() {
        let mut recs = Vec::new();
        for k in 0..10 {
            let mut a = rec(&format!("{k}ab"), "A", "B", PositionOrder::AB, AWins);
            let mut b = rec(&format!("{k}ba"), "A", "B", PositionOrder::BA, if k == 0 { Tie } else { AWins });
            a.client_id = format!("c{k}");
            b.client_id = format!("c{k}");
            recs.extend([a, b]);
        }
        assert!((swap_consistency(&recs).unwrap().fraction() - 0.9).abs() < 1e-12);
    }

    fn arb_relation() -> impl Strategy<Value = Relation> {
        prop_oneof![Just(AWins), Just(BWins), Just(Tie)]
    }

    proptest! {
        #[test]
        fn kappa_is_symmetric(pairs in proptest::collection::vec((arb_relation(), arb_relation()), 1..50)) {
            let (x, y): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            match (cohens_kappa(&x, &y), cohens_kappa(&y, &x)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn mirrored_orders_swap_shares(rels in proptest::collection::vec((arb_relation(), any::<bool>()), 1..40)) {
            let recs: Vec<BattleRecord> = rels
                .iter()
                .enumerate()
                .map(|(i, (r, ab))| {
                    let o = if *ab { PositionOrder::AB } else { PositionOrder::BA };
                    rec(&i.to_string(), "A", "B", o, *r)
                })
                .collect();
            let mirror: Vec<BattleRecord> = recs
                .iter()
                .map(|r| BattleRecord { position_order: r.position_order.swapped(), ..r.clone() })
                .collect();
            let a = position_share(&recs).unwrap();
            let b = position_share(&mirror).unwrap();
            prop_assert_eq!(a.first, b.second);
            prop_assert_eq!(a.second, b.first);
            prop_assert_eq!(a.tie, b.tie);
            prop_assert!((a.first + a.second + a.tie - 1.0).abs() < 1e-12);
        }

        #[test]
        fn consistency_ignores_model_names(rels in proptest::collection::vec((arb_relation(), arb_relation()), 1..20)) {
            let build = |a: &str, b: &str| -> Vec<BattleRecord> {
                rels.iter().enumerate().flat_map(|(k, (x, y))| {
                    let mut p = rec(&format!("{k}ab"), a, b, PositionOrder::AB, *x);
                    let mut q = rec(&format!("{k}ba"), a, b, PositionOrder::BA, *y);
                    p.client_id = format!("c{k}");
                    q.client_id = format!("c{k}");
                    [p, q]
                }).collect()
            };
            let u = swap_consistency(&build("alpha", "beta")).unwrap();
            let v = swap_consistency(&build("zeta", "eta")).unwrap();
            prop_assert_eq!(u, v);
        }
    }
}
