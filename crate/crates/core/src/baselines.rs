//! Heuristic edge-addition attacks used for comparison. Each picks up to `Δ`
//! users who have not yet interacted with the target and connects them to it.

use rand::seq::index::sample;
use rand::Rng;

use crate::data::{InteractionMatrix, Perturbation};
use crate::error::{Error, Result};
use crate::model::TrainedModel;

pub const RAND_FILTER: &str = "randfilter";
pub const IU_FILTER: &str = "iufilter";
pub const RU_FILTER: &str = "rufilter";

fn eligible_users(graph: &InteractionMatrix, target: usize) -> Result<Vec<usize>> {
    if target >= graph.num_items() {
        return Err(Error::OutOfRange {
            what: "target item",
            index: target,
            limit: graph.num_items(),
        });
    }
    Ok((0..graph.num_users())
        .filter(|&u| !graph.contains(u, target))
        .collect())
}

fn record(attack: &str, target: usize, budget: usize, mut users: Vec<usize>) -> Perturbation {
    users.sort_unstable();
    Perturbation {
        attack: attack.to_string(),
        target_item: target,
        budget,
        added_users: users,
        seed: None,
    }
}

/// Highest `key` first, ascending user index on ties.
fn top_by_key(mut users: Vec<usize>, budget: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    users.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    users.truncate(budget);
    users
}

/// `Δ` users drawn uniformly without replacement from those not yet linked to
/// the target.
pub fn rand_filter<R: Rng + ?Sized>(
    graph: &InteractionMatrix,
    target: usize,
    budget: usize,
    rng: &mut R,
) -> Result<Perturbation> {
    let eligible = eligible_users(graph, target)?;
    let take = budget.min(eligible.len());
    let chosen = sample(rng, eligible.len(), take)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    Ok(record(RAND_FILTER, target, budget, chosen))
}

/// The `Δ` eligible users with the most interactions.
pub fn iu_filter(graph: &InteractionMatrix, target: usize, budget: usize) -> Result<Perturbation> {
    let eligible = eligible_users(graph, target)?;
    let chosen = top_by_key(eligible, budget, |u| graph.user_degree(u) as f64);
    Ok(record(IU_FILTER, target, budget, chosen))
}

/// The `Δ` eligible users with the highest predicted score for the target.
pub fn ru_filter(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    target: usize,
    budget: usize,
) -> Result<Perturbation> {
    let eligible = eligible_users(graph, target)?;
    let z = model.embed(graph)?;
    let scores = z.users.dot(&z.items.row(target));
    let chosen = top_by_key(eligible, budget, |u| scores[u]);
    Ok(record(RU_FILTER, target, budget, chosen))
}
