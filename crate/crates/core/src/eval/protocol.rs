use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{CleanComparison, ExperimentReport, PromotionResult};
use super::{
    hit_number, item_hit_counts, pruned_hit_number, truncate_lists, AttackMethod, Protocol,
};
use crate::attack::AttackConfig;
use crate::data::{apply_perturbation, BudgetVariant, InteractionMatrix, Perturbation};
use crate::error::{Error, Result};
use crate::model::{
    rec_metrics, recommend_topk, ModelConfig, RecMetrics, RecommendationList, TrainedModel,
};
use crate::training::train;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: String,
    /// Degree percentile the targets were drawn from.
    pub item_set: f64,
    pub budget_variant: Option<BudgetVariant>,
    /// List lengths to report, e.g. `[50]` or `[10, 20, 50]`.
    pub ks: Vec<usize>,
    pub attack: AttackConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(dataset: impl Into<String>, attack: AttackConfig) -> Self {
        Self {
            dataset: dataset.into(),
            item_set: 10.0,
            budget_variant: None,
            ks: vec![50],
            attack,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidArgument(
                "need at least one positive K".into(),
            ));
        }
        self.attack.validate()
    }

    fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1)
    }

    fn report(&self, protocol: Protocol, rows: Vec<PromotionResult>) -> ExperimentReport {
        ExperimentReport::new(
            self.dataset.clone(),
            protocol,
            self.item_set,
            self.budget_variant.map(BudgetVariant::index),
            rows,
        )
    }
}

/// Every method on every item, item-major. Attacks on different items run in
/// parallel against the shared model.
pub fn craft_perturbations(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    methods: &[AttackMethod],
    items: &[usize],
    config: &ExperimentConfig,
) -> Result<Vec<Perturbation>> {
    config.validate()?;
    let per_item: Vec<Vec<Perturbation>> = items
        .par_iter()
        .map(|&t| {
            methods
                .iter()
                .map(|m| m.craft(model, graph, t, &config.attack, config.seed))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_item.into_iter().flatten().collect())
}

fn rows_for(
    recs: &RecommendationList,
    perturbation: &Perturbation,
    config: &ExperimentConfig,
    model_seed: u64,
    test: Option<&InteractionMatrix>,
) -> Vec<PromotionResult> {
    let t = perturbation.target_item;
    config
        .ks
        .iter()
        .map(|&k| {
            let quality = test.map(|test| rec_metrics(&truncate_lists(recs, k), test));
            PromotionResult {
                attack: perturbation.attack.clone(),
                target_item: t,
                budget: perturbation.budget,
                edits: perturbation.added_users.len(),
                k,
                seed: model_seed,
                hn: hit_number(recs, t, k),
                phn: pruned_hit_number(recs, t, k, perturbation),
                quality,
            }
        })
        .collect()
}

fn baseline_quality(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    config: &ExperimentConfig,
    test: &InteractionMatrix,
) -> Result<Vec<(usize, u64, RecMetrics)>> {
    let recs = recommend_topk(&model.embed(graph)?, graph, config.max_k())?;
    Ok(config
        .ks
        .iter()
        .map(|&k| {
            (
                k,
                model.config.seed,
                rec_metrics(&truncate_lists(&recs, k), test),
            )
        })
        .collect())
}

/// Evaluates precomputed perturbations on fixed models: each model keeps its
/// parameters and only the propagation sees the perturbed graph.
pub fn evaluate_fixed(
    models: &[&TrainedModel],
    graph: &InteractionMatrix,
    perturbations: &[Perturbation],
    config: &ExperimentConfig,
    test: Option<&InteractionMatrix>,
    protocol: Protocol,
) -> Result<ExperimentReport> {
    config.validate()?;
    let mut rows = Vec::new();
    for model in models {
        for p in perturbations {
            let perturbed = apply_perturbation(graph, p)?;
            let recs = recommend_topk(&model.embed(&perturbed)?, &perturbed, config.max_k())?;
            rows.extend(rows_for(&recs, p, config, model.config.seed, test));
        }
    }
    let mut report = config.report(protocol, rows);
    if let Some(test) = test {
        for model in models {
            report
                .baseline_quality
                .extend(baseline_quality(model, graph, config, test)?);
        }
    }
    Ok(report)
}

/// Attacks crafted and evaluated against the same fixed parameters.
pub fn experiment_whitebox(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    methods: &[AttackMethod],
    items: &[usize],
    config: &ExperimentConfig,
    test: Option<&InteractionMatrix>,
) -> Result<ExperimentReport> {
    let perturbations = craft_perturbations(model, graph, methods, items, config)?;
    evaluate_fixed(
        &[model],
        graph,
        &perturbations,
        config,
        test,
        Protocol::Whitebox,
    )
}

/// Attacks crafted on `source`, evaluated on victims trained independently
/// on the clean graph.
pub fn experiment_blackbox(
    source: &TrainedModel,
    victim_configs: &[ModelConfig],
    graph: &InteractionMatrix,
    methods: &[AttackMethod],
    items: &[usize],
    config: &ExperimentConfig,
    test: Option<&InteractionMatrix>,
) -> Result<ExperimentReport> {
    let perturbations = craft_perturbations(source, graph, methods, items, config)?;
    let victims = victim_configs
        .iter()
        .map(|c| train(graph, c))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TrainedModel> = victims.iter().collect();
    evaluate_fixed(
        &refs,
        graph,
        &perturbations,
        config,
        test,
        Protocol::Blackbox,
    )
}

/// Retrains from scratch on each perturbed graph and measures the target, plus
/// clean items whose degree equals the target's degree after perturbation.
pub fn experiment_retrain(
    graph: &InteractionMatrix,
    perturbations: &[Perturbation],
    train_config: &ModelConfig,
    config: &ExperimentConfig,
    test: Option<&InteractionMatrix>,
) -> Result<ExperimentReport> {
    config.validate()?;
    let outcomes: Vec<(Vec<PromotionResult>, Vec<CleanComparison>)> = perturbations
        .par_iter()
        .map(|p| {
            let perturbed = apply_perturbation(graph, p)?;
            let model = train(&perturbed, train_config)?;
            let recs = recommend_topk(&model.embed(&perturbed)?, &perturbed, config.max_k())?;
            let rows = rows_for(&recs, p, config, train_config.seed, test);
            let t = p.target_item;
            let degree = perturbed.item_degree(t);
            let peers: Vec<usize> = (0..graph.num_items())
                .filter(|&j| j != t && perturbed.item_degree(j) == degree)
                .collect();
            let comparisons = rows
                .iter()
                .map(|row| {
                    let counts = item_hit_counts(&recs, graph.num_items(), row.k);
                    let clean_mean_hn = (!peers.is_empty()).then(|| {
                        peers.iter().map(|&j| counts[j] as f64).sum::<f64>() / peers.len() as f64
                    });
                    CleanComparison {
                        attack: p.attack.clone(),
                        target_item: t,
                        k: row.k,
                        degree,
                        target_phn: row.phn,
                        clean_items: peers.len(),
                        clean_mean_hn,
                    }
                })
                .collect();
            Ok((rows, comparisons))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut comparisons = Vec::new();
    for (r, c) in outcomes {
        rows.extend(r);
        comparisons.extend(c);
    }
    let mut report = config.report(Protocol::Retrain, rows);
    report.clean_comparisons = comparisons;
    if let Some(test) = test {
        let clean = train(graph, train_config)?;
        report.baseline_quality = baseline_quality(&clean, graph, config, test)?;
    }
    Ok(report)
}
