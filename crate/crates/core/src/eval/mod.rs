//! Promotion metrics and the evaluation protocols: fixed-parameter (white-box),
//! transfer to independently trained victims (black-box), and retraining on
//! the perturbed graph.

mod protocol;
mod report;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, PROPOSED};
use crate::baselines::{iu_filter, rand_filter, ru_filter, IU_FILTER, RAND_FILTER, RU_FILTER};
use crate::data::{compute_degrees, select_item_percentile, InteractionMatrix, Perturbation};
use crate::error::{Error, Result};
use crate::model::{rec_metrics, recommend_topk, RecMetrics, RecommendationList, TrainedModel};
use crate::seeds::{component_rng, item_rng, Component};

pub use protocol::{
    craft_perturbations, evaluate_fixed, experiment_blackbox, experiment_retrain,
    experiment_whitebox, ExperimentConfig,
};
pub use report::{
    AttackSummary, CleanComparison, ExperimentReport, PromotionResult, PHN_DEFINITION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Whitebox,
    Blackbox,
    Retrain,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Whitebox => "whitebox",
            Protocol::Blackbox => "blackbox",
            Protocol::Retrain => "retrain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Proposed,
    RandFilter,
    IuFilter,
    RuFilter,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 4] = [
        AttackMethod::Proposed,
        AttackMethod::RandFilter,
        AttackMethod::IuFilter,
        AttackMethod::RuFilter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Proposed => PROPOSED,
            AttackMethod::RandFilter => RAND_FILTER,
            AttackMethod::IuFilter => IU_FILTER,
            AttackMethod::RuFilter => RU_FILTER,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attack method {name:?}")))
    }

    /// Builds the perturbation for `target`. `seed` only matters for
    /// RandFilter, whose generator is derived from it and the target index.
    pub fn craft(
        self,
        model: &TrainedModel,
        graph: &InteractionMatrix,
        target: usize,
        config: &AttackConfig,
        seed: u64,
    ) -> Result<Perturbation> {
        config.validate()?;
        match self {
            AttackMethod::Proposed => run_attack(model, graph, target, config),
            AttackMethod::RandFilter => {
                let mut rng = item_rng(seed, Component::RandFilter, target);
                let mut p = rand_filter(graph, target, config.budget, &mut rng)?;
                p.seed = Some(seed);
                Ok(p)
            }
            AttackMethod::IuFilter => iu_filter(graph, target, config.budget),
            AttackMethod::RuFilter => ru_filter(model, graph, target, config.budget),
        }
    }
}

/// Number of users whose first `k` recommendations contain `target`.
pub fn hit_number(recs: &RecommendationList, target: usize, k: usize) -> usize {
    recs.lists
        .iter()
        .filter(|list| list.iter().take(k).any(|&j| j as usize == target))
        .count()
}

/// Hits among users that the perturbation did not connect to the target.
pub fn pruned_hit_number(
    recs: &RecommendationList,
    target: usize,
    k: usize,
    perturbation: &Perturbation,
) -> usize {
    recs.lists
        .iter()
        .enumerate()
        .filter(|(u, _)| perturbation.added_users.binary_search(u).is_err())
        .filter(|(_, list)| list.iter().take(k).any(|&j| j as usize == target))
        .count()
}

/// `hit_number` for every item at once.
pub fn item_hit_counts(recs: &RecommendationList, num_items: usize, k: usize) -> Vec<usize> {
    let mut counts = vec![0; num_items];
    for list in &recs.lists {
        for &j in list.iter().take(k) {
            counts[j as usize] += 1;
        }
    }
    counts
}

/// The lists cut to their first `k` entries.
pub fn truncate_lists(recs: &RecommendationList, k: usize) -> RecommendationList {
    RecommendationList {
        k,
        lists: recs
            .lists
            .iter()
            .map(|l| l[..l.len().min(k)].to_vec())
            .collect(),
    }
}

/// Up to `count` distinct items from the `percentile` degree bucket,
/// ascending.
pub fn sample_target_items(
    graph: &InteractionMatrix,
    percentile: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let bucket = select_item_percentile(&compute_degrees(graph), percentile)?;
    let take = count.min(bucket.items.len());
    let mut rng = component_rng(seed, Component::Targets);
    let mut items: Vec<usize> = sample(&mut rng, bucket.items.len(), take)
        .into_iter()
        .map(|k| bucket.items[k])
        .collect();
    items.sort_unstable();
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricDelta {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityAudit {
    pub k: usize,
    pub before: RecMetrics,
    pub after: RecMetrics,
    /// `after - before`
    pub absolute: MetricDelta,
    /// `(after - before) / before`, zero when both are zero.
    pub relative: MetricDelta,
}

fn relative_change(before: f64, after: f64) -> f64 {
    if before == after {
        0.0
    } else {
        (after - before) / before
    }
}

/// Test-split precision/recall/NDCG of `before` on the clean graph against
/// `after` on the perturbed graph. Pass the same model twice for the
/// fixed-parameter setting.
pub fn audit_recommendation_quality(
    before: &TrainedModel,
    after: &TrainedModel,
    clean: &InteractionMatrix,
    perturbed: &InteractionMatrix,
    test: &InteractionMatrix,
    k: usize,
) -> Result<QualityAudit> {
    let m_before = rec_metrics(&recommend_topk(&before.embed(clean)?, clean, k)?, test);
    let m_after = rec_metrics(
        &recommend_topk(&after.embed(perturbed)?, perturbed, k)?,
        test,
    );
    Ok(QualityAudit {
        k,
        before: m_before,
        after: m_after,
        absolute: MetricDelta {
            precision: m_after.precision - m_before.precision,
            recall: m_after.recall - m_before.recall,
            ndcg: m_after.ndcg - m_before.ndcg,
        },
        relative: MetricDelta {
            precision: relative_change(m_before.precision, m_after.precision),
            recall: relative_change(m_before.recall, m_after.recall),
            ndcg: relative_change(m_before.ndcg, m_after.ndcg),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::apply_perturbation;
    use crate::model::{init_embeddings, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn recs(lists: Vec<Vec<u32>>, k: usize) -> RecommendationList {
        RecommendationList { k, lists }
    }

    #[test]
    fn hit_number_examples() {
        let all = recs(vec![vec![3, 1]; 5], 2);
        assert_eq!(hit_number(&all, 3, 2), 5);
        assert_eq!(hit_number(&all, 1, 1), 0);
        assert_eq!(hit_number(&all, 7, 2), 0);
        let none = Perturbation::empty("proposed", 3, 2);
        assert_eq!(pruned_hit_number(&all, 3, 2, &none), 5);
        let mut p = Perturbation::empty("proposed", 3, 5);
        p.added_users = vec![0, 1, 2, 3, 4];
        assert_eq!(pruned_hit_number(&all, 3, 2, &p), 0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in AttackMethod::ALL {
            assert_eq!(AttackMethod::from_name(m.name()).unwrap(), m);
        }
        assert!(AttackMethod::from_name("pgd").is_err());
    }

    fn random_setup(seed: u64) -> (InteractionMatrix, TrainedModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (30, 20);
        let pairs: Vec<_> = (0..m)
            .flat_map(|u| (0..n).map(move |i| (u, i)))
            .filter(|_| rng.random::<f64>() < 0.2)
            .collect();
        let r = InteractionMatrix::from_pairs(m, n, pairs).unwrap();
        let mut cfg = ModelConfig::new(2, 4);
        cfg.seed = seed;
        cfg.init_std = 1.0;
        let e = init_embeddings(&cfg, m, n);
        (r, TrainedModel::new(cfg, e).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn pruned_hits_match_loop_and_perturbed_hits(seed in 0u64..1000, t in 0usize..20, budget in 1usize..8) {
            let (r, model) = random_setup(seed);
            let p = AttackMethod::RandFilter
                .craft(&model, &r, t, &AttackConfig::new(budget), seed)
                .unwrap();
            let perturbed = apply_perturbation(&r, &p).unwrap();
            let lists = recommend_topk(&model.embed(&perturbed).unwrap(), &perturbed, 5).unwrap();
            let mut loop_hits = 0;
            let mut added_hits = 0;
            for u in 0..30 {
                let hit = lists.list(u).contains(&(t as u32));
                loop_hits += hit as usize;
                if p.added_users.contains(&u) && hit {
                    added_hits += 1;
                }
            }
            let hn = hit_number(&lists, t, 5);
            let phn = pruned_hit_number(&lists, t, 5, &p);
            prop_assert_eq!(hn, loop_hits);
            prop_assert_eq!(phn, loop_hits - added_hits);
            prop_assert_eq!(phn, hn);
            prop_assert!(phn <= hn);
            prop_assert_eq!(item_hit_counts(&lists, 20, 5)[t], hn);
        }
    }

    #[test]
    fn truncation_keeps_prefix() {
        let r = recs(vec![vec![4, 2, 9], vec![1]], 3);
        let t = truncate_lists(&r, 2);
        assert_eq!(t.lists, vec![vec![4, 2], vec![1]]);
        assert_eq!(hit_number(&t, 9, 3), 0);
    }

    #[test]
    fn target_sampling_stays_in_bucket() {
        let (r, _) = random_setup(4);
        let degrees = compute_degrees(&r);
        let bucket = select_item_percentile(&degrees, 10.0).unwrap();
        let items = sample_target_items(&r, 10.0, 3, 9).unwrap();
        assert_eq!(items.len(), 3.min(bucket.items.len()));
        assert!(items.iter().all(|i| bucket.items.contains(i)));
        assert_eq!(items, sample_target_items(&r, 10.0, 3, 9).unwrap());
        assert!(items.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn audit_identity_and_oracle() {
        let (r, model) = random_setup(2);
        let (test, _) = random_setup(3);
        let same = audit_recommendation_quality(&model, &model, &r, &r, &test, 5).unwrap();
        assert_eq!(same.absolute, MetricDelta::default());
        assert_eq!(same.relative, MetricDelta::default());

        let p = AttackMethod::IuFilter
            .craft(&model, &r, 3, &AttackConfig::new(4), 0)
            .unwrap();
        let pert = apply_perturbation(&r, &p).unwrap();
        let audit = audit_recommendation_quality(&model, &model, &r, &pert, &test, 5).unwrap();
        let after = rec_metrics(
            &recommend_topk(&model.embed(&pert).unwrap(), &pert, 5).unwrap(),
            &test,
        );
        assert_eq!(audit.after, after);
        assert!((audit.absolute.recall - (after.recall - audit.before.recall)).abs() < 1e-15);
    }
}
