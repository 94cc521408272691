//! Masked targeted topological attack for promoting a single item.
//!
//! The attack relaxes the interaction matrix to real values, differentiates
//! the masked promotion objective with respect to the target item's column
//! (degree normalization included), and adds the `Δ` highest-saliency edges
//! `(u, t)` whose gradient is positive.

mod gradient;
mod objective;
mod select;

use serde::{Deserialize, Serialize};

use crate::data::{InteractionMatrix, Perturbation};
use crate::error::{Error, Result};
use crate::model::{EmbeddingTable, TrainedModel};

pub use gradient::{grad_full, grad_target_column, target_column_dominance, SaliencyColumn};
pub use objective::{
    attack_objective, objective_from_embeddings, promotion_objective, ObjectiveTerms,
};
pub use select::{build_mask_and_perturb, select_topk_edges};

pub const PROPOSED: &str = "proposed";

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Weight of the target-score term against the competitor penalty.
    pub lambda: f64,
    /// Masking threshold on `σ(r̂_ut)`.
    pub gamma: f64,
    /// Length of the recommendation lists in the objective.
    pub k: usize,
    pub budget: usize,
    /// Users kept when nobody clears `gamma`.
    pub fallback_pool_size: usize,
}

impl AttackConfig {
    pub fn new(budget: usize) -> Self {
        Self {
            lambda: 0.5,
            gamma: 0.95,
            k: 50,
            budget,
            fallback_pool_size: budget.max(100),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda {} not in [0,1]",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} not in [0,1)",
                self.gamma
            )));
        }
        if self.k == 0 || self.budget == 0 || self.fallback_pool_size == 0 {
            return Err(Error::InvalidArgument(
                "k, budget and fallback_pool_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::new(10)
    }
}

/// Users whose target confidence clears the masking threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedUserSet {
    /// Ascending user indices.
    pub users: Vec<usize>,
    pub gamma: f64,
    /// Set when no user cleared `gamma` and the top-scoring pool was used.
    pub fallback: bool,
}

/// `U' = {u : σ(r̂_ut) ≥ γ}` from final embeddings, with the top
/// `fallback_pool_size` users by score when that set is empty.
pub fn mask_users_from_embeddings(
    embeddings: &EmbeddingTable,
    target: usize,
    gamma: f64,
    fallback_pool_size: usize,
) -> Result<MaskedUserSet> {
    if target >= embeddings.num_items() {
        return Err(Error::OutOfRange {
            what: "target item",
            index: target,
            limit: embeddings.num_items(),
        });
    }
    let scores = embeddings.users.dot(&embeddings.items.row(target));
    let users: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| sigmoid(s) >= gamma)
        .map(|(u, _)| u)
        .collect();
    if !users.is_empty() {
        return Ok(MaskedUserSet {
            users,
            gamma,
            fallback: false,
        });
    }
    let mut order =
        crate::model::top_k_indices(scores.as_slice().unwrap(), fallback_pool_size, &[])
            .into_iter()
            .map(|u| u as usize)
            .collect::<Vec<_>>();
    order.sort_unstable();
    Ok(MaskedUserSet {
        users: order,
        gamma,
        fallback: true,
    })
}

pub fn mask_users(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    target: usize,
    gamma: f64,
    fallback_pool_size: usize,
) -> Result<MaskedUserSet> {
    let z = model.embed(graph)?;
    mask_users_from_embeddings(&z, target, gamma, fallback_pool_size)
}

/// Single-step masked attack: mask, differentiate the target column, keep the
/// top-`Δ` positive-gradient candidates.
pub fn run_attack(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    target: usize,
    config: &AttackConfig,
) -> Result<Perturbation> {
    config.validate()?;
    if target >= graph.num_items() {
        return Err(Error::OutOfRange {
            what: "target item",
            index: target,
            limit: graph.num_items(),
        });
    }
    let masked = mask_users(
        model,
        graph,
        target,
        config.gamma,
        config.fallback_pool_size,
    )?;
    let saliency = grad_target_column(model, graph, target, &masked, config.lambda, config.k)?;
    let edges = select_topk_edges(&saliency, config.budget);
    build_mask_and_perturb(graph, target, &edges, config.budget, PROPOSED)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.880797).abs() < 1e-6);
        for x in [-1000.0, -30.0, -1.5, 0.3, 7.0, 1000.0] {
            let s = sigmoid(x);
            assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&s));
            assert!(log_sigmoid(x).is_finite());
        }
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn table_with_target_scores(scores: &[f64]) -> EmbeddingTable {
        let users = ndarray::Array2::from_shape_fn((scores.len(), 1), |(u, _)| scores[u]);
        EmbeddingTable::new(users, array![[1.0]]).unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn mask_threshold_filter() {
        let z = table_with_target_scores(&[logit(0.96), logit(0.50), logit(0.97)]);
        let m = mask_users_from_embeddings(&z, 0, 0.95, 3).unwrap();
        assert_eq!(m.users, vec![0, 2]);
        assert!(!m.fallback);
        let all = mask_users_from_embeddings(&z, 0, 0.0, 3).unwrap();
        assert_eq!(all.users, vec![0, 1, 2]);
    }

    #[test]
    fn mask_fallback_pool() {
        let z = table_with_target_scores(&[0.1, 0.4, -0.3, 0.2, 0.0]);
        let m = mask_users_from_embeddings(&z, 0, 0.95, 3).unwrap();
        assert!(m.fallback);
        assert_eq!(m.users, vec![0, 1, 3]);
        assert!(mask_users_from_embeddings(&z, 1, 0.95, 3).is_err());
    }

    #[test]
    fn config_defaults() {
        let c = AttackConfig::new(7);
        assert_eq!((c.lambda, c.gamma, c.k, c.budget), (0.5, 0.95, 50, 7));
        assert_eq!(c.fallback_pool_size, 100);
        assert_eq!(AttackConfig::new(250).fallback_pool_size, 250);
        let mut bad = c.clone();
        bad.budget = 0;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.gamma = 1.0;
        assert!(bad.validate().is_err());
    }
}
