use super::{log_sigmoid, MaskedUserSet};
use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::model::{recommend_for_users, EmbeddingTable, TrainedModel};

/// Frozen pieces of the masked objective: the user subset and each user's
/// top-K list on the unperturbed graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTerms {
    pub target: usize,
    pub users: Vec<usize>,
    /// `lists[k]` belongs to `users[k]`.
    pub lists: Vec<Vec<u32>>,
    pub lambda: f64,
}

impl ObjectiveTerms {
    pub fn build(
        embeddings: &EmbeddingTable,
        graph: &InteractionMatrix,
        target: usize,
        masked: &MaskedUserSet,
        lambda: f64,
        k: usize,
    ) -> Result<Self> {
        if masked.users.is_empty() {
            return Err(Error::InvalidArgument("masked user set is empty".into()));
        }
        if target >= graph.num_items() {
            return Err(Error::OutOfRange {
                what: "target item",
                index: target,
                limit: graph.num_items(),
            });
        }
        let lists = recommend_for_users(embeddings, graph, &masked.users, k)?;
        Ok(Self {
            target,
            users: masked.users.clone(),
            lists,
            lambda,
        })
    }

    /// Calls `f(user, item, weight)` for every score entering the objective,
    /// where the objective is `Σ weight · log σ(r̂_{user,item})`.
    pub fn for_each_term(&self, mut f: impl FnMut(usize, usize, f64)) {
        let norm = 1.0 / self.users.len() as f64;
        for (&u, list) in self.users.iter().zip(&self.lists) {
            f(u, self.target, self.lambda * norm);
            for &j in list {
                if j as usize != self.target {
                    f(u, j as usize, -(1.0 - self.lambda) * norm);
                }
            }
        }
    }
}

/// Masked objective evaluated on given final embeddings.
pub fn objective_from_embeddings(embeddings: &EmbeddingTable, terms: &ObjectiveTerms) -> f64 {
    let mut total = 0.0;
    terms.for_each_term(|u, j, w| {
        total += w * log_sigmoid(embeddings.users.row(u).dot(&embeddings.items.row(j)));
    });
    total
}

/// `(1/|U'|) Σ_{u∈U'} [λ log σ(r̂_ut) − (1−λ) Σ_{j∈Ω_u, j≠t} log σ(r̂_uj)]`.
pub fn attack_objective(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    target: usize,
    masked: &MaskedUserSet,
    lambda: f64,
    k: usize,
) -> Result<f64> {
    let z = model.embed(graph)?;
    let terms = ObjectiveTerms::build(&z, graph, target, masked, lambda, k)?;
    Ok(objective_from_embeddings(&z, &terms))
}

/// The unmasked promotion objective, averaged over every user.
pub fn promotion_objective(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    target: usize,
    lambda: f64,
    k: usize,
) -> Result<f64> {
    let z = model.embed(graph)?;
    let m = graph.num_users();
    let all: Vec<usize> = (0..m).collect();
    let lists = recommend_for_users(&z, graph, &all, k)?;
    let mut total = 0.0;
    for (u, list) in lists.iter().enumerate() {
        let zu = z.users.row(u);
        let mut penalty = 0.0;
        for &j in list.iter().filter(|&&j| j as usize != target) {
            penalty += log_sigmoid(zu.dot(&z.items.row(j as usize)));
        }
        total += lambda * log_sigmoid(zu.dot(&z.items.row(target))) - (1.0 - lambda) * penalty;
    }
    Ok(total / m as f64)
}
