use serde::{Deserialize, Serialize};

use super::RecommendationList;
use crate::data::InteractionMatrix;

/// Precision, recall and NDCG at K, averaged over users with test positives.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RecMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub users: usize,
}

/// Binary-relevance metrics with a `log2(rank + 1)` discount. Precision
/// divides by K even when a list is shorter.
pub fn rec_metrics(recs: &RecommendationList, test: &InteractionMatrix) -> RecMetrics {
    let k = recs.k;
    let mut totals = RecMetrics::default();
    for u in 0..recs.num_users().min(test.num_users()) {
        let positives = test.user_items(u);
        if positives.is_empty() {
            continue;
        }
        let mut hits = 0usize;
        let mut dcg = 0.0;
        for (rank, item) in recs.list(u).iter().take(k).enumerate() {
            if positives.binary_search(item).is_ok() {
                hits += 1;
                dcg += 1.0 / ((rank + 2) as f64).log2();
            }
        }
        let ideal: f64 = (0..positives.len().min(k))
            .map(|rank| 1.0 / ((rank + 2) as f64).log2())
            .sum();
        totals.precision += hits as f64 / k as f64;
        totals.recall += hits as f64 / positives.len() as f64;
        totals.ndcg += dcg / ideal;
        totals.users += 1;
    }
    if totals.users > 0 {
        let n = totals.users as f64;
        totals.precision /= n;
        totals.recall /= n;
        totals.ndcg /= n;
    }
    totals
}
