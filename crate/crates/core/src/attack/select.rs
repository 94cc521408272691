use super::SaliencyColumn;
use crate::data::{InteractionMatrix, Perturbation};
use crate::error::{Error, Result};

/// The `budget` candidates with the largest strictly positive gradient,
/// ordered by gradient (descending) then user index (ascending).
pub fn select_topk_edges(saliency: &SaliencyColumn, budget: usize) -> Vec<usize> {
    let mut ranked: Vec<usize> = saliency
        .gradients
        .iter()
        .zip(&saliency.candidates)
        .enumerate()
        .filter(|(_, (&g, &candidate))| candidate && g > 0.0)
        .map(|(u, _)| u)
        .collect();
    let grads = &saliency.gradients;
    let by_gain = |a: &usize, b: &usize| grads[*b].total_cmp(&grads[*a]).then(a.cmp(b));
    if ranked.len() > budget && budget > 0 {
        ranked.select_nth_unstable_by(budget - 1, by_gain);
    }
    ranked.truncate(budget);
    ranked.sort_unstable_by(by_gain);
    ranked
}

/// Sets `R_{u,t} = 1` for every selected user and records the edits.
pub fn build_mask_and_perturb(
    graph: &InteractionMatrix,
    target: usize,
    selected: &[usize],
    budget: usize,
    attack: &str,
) -> Result<Perturbation> {
    if selected.len() > budget {
        return Err(Error::InvalidPerturbation(format!(
            "{} selected edges exceed budget {budget}",
            selected.len()
        )));
    }
    let mut added_users = selected.to_vec();
    added_users.sort_unstable();
    let perturbation = Perturbation {
        attack: attack.to_string(),
        target_item: target,
        budget,
        added_users,
        seed: None,
    };
    perturbation.validate(graph)?;
    Ok(perturbation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::apply_perturbation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn column(gradients: Vec<f64>) -> SaliencyColumn {
        let candidates = vec![true; gradients.len()];
        SaliencyColumn {
            target_item: 0,
            gradients,
            candidates,
        }
    }

    #[test]
    fn picks_largest_positive() {
        assert_eq!(
            select_topk_edges(&column(vec![0.5, -0.2, 0.9]), 2),
            vec![2, 0]
        );
        assert!(select_topk_edges(&column(vec![-0.5, -0.2, -0.9]), 2).is_empty());
        assert!(select_topk_edges(&column(vec![0.0, 0.0]), 2).is_empty());
        assert_eq!(select_topk_edges(&column(vec![0.3, -1.0]), 5), vec![0]);
    }

    #[test]
    fn skips_existing_edges_and_breaks_ties_by_index() {
        let mut s = column(vec![0.9, 0.4, 0.4, 0.4]);
        s.candidates[0] = false;
        assert_eq!(select_topk_edges(&s, 2), vec![1, 2]);
    }

    #[test]
    fn matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let gradients: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
            let candidates: Vec<bool> = (0..1000).map(|_| rng.random::<f64>() < 0.9).collect();
            let s = SaliencyColumn {
                target_item: 0,
                gradients: gradients.clone(),
                candidates: candidates.clone(),
            };
            let mut oracle: Vec<(f64, usize)> = (0..1000)
                .filter(|&u| candidates[u] && gradients[u] > 0.0)
                .map(|u| (gradients[u], u))
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = oracle.iter().take(10).map(|p| p.1).collect();
            assert_eq!(select_topk_edges(&s, 10), expect);
        }
    }

    #[test]
    fn perturbation_record() {
        let r = InteractionMatrix::from_pairs(3, 2, [(1, 0)]).unwrap();
        let p = build_mask_and_perturb(&r, 1, &[2, 0], 2, "proposed").unwrap();
        assert_eq!(p.added_users, vec![0, 2]);
        let after = apply_perturbation(&r, &p).unwrap();
        assert!(after.contains(0, 1) && after.contains(2, 1));

        let none = build_mask_and_perturb(&r, 1, &[], 2, "proposed").unwrap();
        assert_eq!(apply_perturbation(&r, &none).unwrap(), r);

        assert!(build_mask_and_perturb(&r, 0, &[1], 2, "proposed").is_err());
        assert!(build_mask_and_perturb(&r, 1, &[0, 1, 2], 2, "proposed").is_err());
    }

    #[test]
    fn dense_diff_within_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (m, n) = (rng.random_range(2..30), rng.random_range(1..8));
            let pairs: Vec<_> = (0..m)
                .flat_map(|u| (0..n).map(move |i| (u, i)))
                .filter(|_| rng.random::<f64>() < 0.3)
                .collect();
            let r = InteractionMatrix::from_pairs(m, n, pairs).unwrap();
            let t = rng.random_range(0..n);
            let budget = rng.random_range(1..6);
            let s = SaliencyColumn {
                target_item: t,
                gradients: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
                candidates: (0..m).map(|u| !r.contains(u, t)).collect(),
            };
            let edges = select_topk_edges(&s, budget);
            let p = build_mask_and_perturb(&r, t, &edges, budget, "proposed").unwrap();
            let diff = apply_perturbation(&r, &p).unwrap().to_dense() - r.to_dense();
            let changed: Vec<_> = diff.indexed_iter().filter(|(_, &v)| v != 0.0).collect();
            assert!(changed.len() <= budget);
            assert!(changed.iter().all(|((_, j), &v)| *j == t && v == 1.0));
        }
    }
}
