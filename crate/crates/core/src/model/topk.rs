use std::cmp::Ordering;

use rayon::prelude::*;

use super::EmbeddingTable;
use crate::data::InteractionMatrix;
use crate::error::{Error, Result};

/// Per-user top-K lists, best first. Training positives never appear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecommendationList {
    pub k: usize,
    pub lists: Vec<Vec<u32>>,
}

impl RecommendationList {
    pub fn list(&self, u: usize) -> &[u32] {
        &self.lists[u]
    }

    pub fn num_users(&self) -> usize {
        self.lists.len()
    }
}

#[inline]
fn rank_order(scores: &[f64], a: u32, b: u32) -> Ordering {
    scores[b as usize]
        .total_cmp(&scores[a as usize])
        .then(a.cmp(&b))
}

/// Indices of the `k` best scores, skipping `exclude` (sorted ascending).
/// Higher score first; equal scores go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize, exclude: &[u32]) -> Vec<u32> {
    let mut candidates: Vec<u32> =
        Vec::with_capacity(scores.len() - exclude.len().min(scores.len()));
    let mut skip = exclude.iter().peekable();
    for i in 0..scores.len() as u32 {
        if skip.peek() == Some(&&i) {
            skip.next();
            continue;
        }
        candidates.push(i);
    }
    if k == 0 {
        return Vec::new();
    }
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    candidates
}

fn user_list(table: &EmbeddingTable, train: &InteractionMatrix, u: usize, k: usize) -> Vec<u32> {
    let scores = table.items.dot(&table.users.row(u));
    top_k_indices(scores.as_slice().unwrap(), k, train.user_items(u))
}

fn check(table: &EmbeddingTable, train: &InteractionMatrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if table.num_users() != train.num_users() || table.num_items() != train.num_items() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings {}x{} vs matrix {}x{}",
            table.num_users(),
            table.num_items(),
            train.num_users(),
            train.num_items()
        )));
    }
    Ok(())
}

/// Top-K items for every user from final embeddings.
pub fn recommend_topk(
    table: &EmbeddingTable,
    train: &InteractionMatrix,
    k: usize,
) -> Result<RecommendationList> {
    check(table, train, k)?;
    let lists = (0..train.num_users())
        .into_par_iter()
        .map(|u| user_list(table, train, u, k))
        .collect();
    Ok(RecommendationList { k, lists })
}

/// Top-K lists for a subset of users, in the order given.
pub fn recommend_for_users(
    table: &EmbeddingTable,
    train: &InteractionMatrix,
    users: &[usize],
    k: usize,
) -> Result<Vec<Vec<u32>>> {
    check(table, train, k)?;
    Ok(users
        .par_iter()
        .map(|&u| user_list(table, train, u, k))
        .collect())
}
