//! Gradients of the masked objective with respect to the relaxed interaction
//! matrix `R`.
//!
//! Normalization is part of the differentiated graph: `R̃ = a_u R b_j` with
//! `a_u = max(d_u, 1)^(-1/2)`, `b_j = max(d_j, 1)^(-1/2)`, and the degrees are
//! row/column sums of `R`. At a degree of exactly 1 the right derivative
//! (the edge-adding direction) is used. Top-K lists are held fixed.
//!
//! [`grad_full`] records the whole dense computation on a [`Tape`]; it is the
//! reference. [`grad_target_column`] is the production path: a hand-written
//! backward over the sparse graph that only materializes column `t`, so its
//! extra storage is a few user- and item-sized tables rather than `M × N`.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::objective::ObjectiveTerms;
use super::{sigmoid, MaskedUserSet};
use crate::data::{InteractionMatrix, NormalizedMatrix};
use crate::error::{Error, Result};
use crate::model::forward::{propagate_items_into, propagate_users_into};
use crate::model::{top_k_indices, EmbeddingTable, TrainedModel};
use crate::tape::Tape;

/// `∂L/∂R_{u,t}` for every user, plus which entries are still zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyColumn {
    pub target_item: usize,
    pub gradients: Vec<f64>,
    /// `true` iff `R_{u,t} = 0`.
    pub candidates: Vec<bool>,
}

impl SaliencyColumn {
    /// `user_index,gradient,selected` rows for debugging dumps.
    pub fn to_csv(&self, selected: &[usize]) -> String {
        let mut out = String::from("user_index,gradient,selected\n");
        for (u, g) in self.gradients.iter().enumerate() {
            let flag = selected.contains(&u) as u8;
            out.push_str(&format!("{u},{g:.12e},{flag}\n"));
        }
        out
    }
}

fn check_inputs(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    target: usize,
    masked: &MaskedUserSet,
) -> Result<()> {
    if model.num_users() != graph.num_users() || model.num_items() != graph.num_items() {
        return Err(Error::DimensionMismatch(format!(
            "model {}x{} vs graph {}x{}",
            model.num_users(),
            model.num_items(),
            graph.num_users(),
            graph.num_items()
        )));
    }
    if target >= graph.num_items() {
        return Err(Error::OutOfRange {
            what: "target item",
            index: target,
            limit: graph.num_items(),
        });
    }
    if masked.users.is_empty() {
        return Err(Error::InvalidArgument("masked user set is empty".into()));
    }
    if let Some(&u) = masked.users.iter().find(|&&u| u >= graph.num_users()) {
        return Err(Error::OutOfRange {
            what: "masked user",
            index: u,
            limit: graph.num_users(),
        });
    }
    Ok(())
}

/// Dense `M × N` gradient of the masked objective, via the tape.
pub fn grad_full(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    target: usize,
    masked: &MaskedUserSet,
    lambda: f64,
    k: usize,
) -> Result<Array2<f64>> {
    check_inputs(model, graph, target, masked)?;
    let alpha = &model.config.layer_weights;
    let (m, n) = (graph.num_users(), graph.num_items());

    let mut tape = Tape::new();
    let r = tape.leaf(graph.to_dense());
    let user_deg = tape.row_sum(r);
    let item_deg = tape.col_sum(r);
    let left = tape.inv_sqrt_clamped(user_deg);
    let right = tape.inv_sqrt_clamped(item_deg);
    let scaled = tape.mul_rows(r, left);
    let rn = tape.mul_cols(scaled, right);
    let rn_t = tape.transpose(rn);

    let mut zu = tape.leaf(model.embeddings.users.clone());
    let mut zi = tape.leaf(model.embeddings.items.clone());
    let mut acc_u = tape.scale(zu, alpha[0]);
    let mut acc_i = tape.scale(zi, alpha[0]);
    for &w in &alpha[1..] {
        let next_u = tape.matmul(rn, zi);
        let next_i = tape.matmul(rn_t, zu);
        zu = next_u;
        zi = next_i;
        let su = tape.scale(zu, w);
        let si = tape.scale(zi, w);
        acc_u = tape.add(acc_u, su);
        acc_i = tape.add(acc_i, si);
    }
    let acc_i_t = tape.transpose(acc_i);
    let scores = tape.matmul(acc_u, acc_i_t);

    let mut weights = Array2::<f64>::zeros((m, n));
    let norm = 1.0 / masked.users.len() as f64;
    for &u in &masked.users {
        let row = tape.value(scores).row(u).to_owned();
        let list = top_k_indices(row.as_slice().unwrap(), k, graph.user_items(u));
        weights[[u, target]] += lambda * norm;
        for j in list {
            if j as usize != target {
                weights[[u, j as usize]] -= (1.0 - lambda) * norm;
            }
        }
    }
    let log_scores = tape.log_sigmoid(scores);
    let objective = tape.weighted_sum(log_scores, weights);
    let mut grads = tape.backward(objective);
    Ok(grads.take(r).unwrap_or_else(|| Array2::zeros((m, n))))
}

fn add_sparse_rows(dst: &mut Array2<f64>, rows: &BTreeMap<usize, Vec<f64>>, scale: f64) {
    if scale == 0.0 {
        return;
    }
    for (&row, values) in rows {
        for (d, v) in dst.row_mut(row).iter_mut().zip(values) {
            *d += scale * v;
        }
    }
}

fn rows_dot(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, out: &mut [f64]) {
    out.par_iter_mut()
        .zip(a.axis_iter(Axis(0)).into_par_iter())
        .zip(b.axis_iter(Axis(0)).into_par_iter())
        .for_each(|((o, x), y)| *o += x.dot(&y));
}

/// Column `t` of the objective gradient, without forming any `M × N` array.
pub fn grad_target_column(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    target: usize,
    masked: &MaskedUserSet,
    lambda: f64,
    k: usize,
) -> Result<SaliencyColumn> {
    check_inputs(model, graph, target, masked)?;
    let alpha = &model.config.layer_weights;
    let num_layers = model.config.num_layers;
    let (m, n, d) = (graph.num_users(), graph.num_items(), model.config.embed_dim);
    let norm = NormalizedMatrix::from_matrix(graph);
    let e0 = &model.embeddings;

    // Forward. Layer 0 is borrowed from the model; layers 1..=L are owned.
    let mut user_layers: Vec<Array2<f64>> = Vec::with_capacity(num_layers);
    let mut item_layers: Vec<Array2<f64>> = Vec::with_capacity(num_layers);
    for l in 1..=num_layers {
        let (prev_u, prev_i) = if l == 1 {
            (e0.users.view(), e0.items.view())
        } else {
            (user_layers[l - 2].view(), item_layers[l - 2].view())
        };
        let mut next_u = Array2::zeros((m, d));
        let mut next_i = Array2::zeros((n, d));
        propagate_users_into(&norm, prev_i, &mut next_u);
        propagate_items_into(&norm, prev_u, &mut next_i);
        user_layers.push(next_u);
        item_layers.push(next_i);
    }

    // Gradient of the objective w.r.t. the combined tables, kept sparse.
    let (grad_z_users, grad_z_items) = {
        let mut z = EmbeddingTable {
            users: &e0.users * alpha[0],
            items: &e0.items * alpha[0],
        };
        for l in 1..=num_layers {
            z.users.scaled_add(alpha[l], &user_layers[l - 1]);
            z.items.scaled_add(alpha[l], &item_layers[l - 1]);
        }
        let terms = ObjectiveTerms::build(&z, graph, target, masked, lambda, k)?;
        let mut gu: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut gi: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        terms.for_each_term(|u, j, w| {
            let zu = z.users.row(u);
            let zj = z.items.row(j);
            // d/ds [w log σ(s)] = w σ(-s)
            let c = w * sigmoid(-zu.dot(&zj));
            for (g, x) in gu
                .entry(u)
                .or_insert_with(|| vec![0.0; d])
                .iter_mut()
                .zip(zj)
            {
                *g += c * x;
            }
            for (g, x) in gi
                .entry(j)
                .or_insert_with(|| vec![0.0; d])
                .iter_mut()
                .zip(zu)
            {
                *g += c * x;
            }
        });
        (gu, gi)
    };

    // Reverse sweep. `gu`/`gi` hold the gradient w.r.t. layer l; the buffers
    // of layer l are recycled for layer l-1 once they are no longer read.
    let mut column = vec![0.0; m];
    let mut row_term = vec![0.0; m];
    let mut col_term = 0.0;
    let mut gu = Array2::zeros((m, d));
    let mut gi = Array2::zeros((n, d));
    add_sparse_rows(&mut gu, &grad_z_users, alpha[num_layers]);
    add_sparse_rows(&mut gi, &grad_z_items, alpha[num_layers]);

    for l in (1..=num_layers).rev() {
        let mut cur_u = std::mem::take(&mut user_layers[l - 1]);
        let mut cur_i = std::mem::take(&mut item_layers[l - 1]);
        let (prev_u, prev_i) = if l == 1 {
            (e0.users.view(), e0.items.view())
        } else {
            (user_layers[l - 2].view(), item_layers[l - 2].view())
        };
        let prev_i_t = prev_i.row(target).to_owned();
        let gi_t = gi.row(target).to_owned();

        // ∂L/∂R̃_{u,t} += <gu_u, Zi^{l-1}_t> + <Zu^{l-1}_u, gi_t>
        column
            .par_iter_mut()
            .enumerate()
            .for_each(|(u, c)| *c += gu.row(u).dot(&prev_i_t) + prev_u.row(u).dot(&gi_t));

        // Σ_k R̃_{u,k} ∂L/∂R̃_{u,k}: first half is <gu_u, (R̃ Zi^{l-1})_u> = <gu_u, Zu^l_u>
        rows_dot(gu.view(), cur_u.view(), &mut row_term);
        // Σ_v R̃_{v,t} ∂L/∂R̃_{v,t}
        col_term += cur_i.row(target).dot(&gi_t);
        let mut back_t = ndarray::Array1::<f64>::zeros(d);
        for (v, w) in norm.column(target) {
            back_t.scaled_add(w, &gu.row(v));
        }
        col_term += back_t.dot(&prev_i_t);

        propagate_users_into(&norm, gi.view(), &mut cur_u);
        // second half: <Zu^{l-1}_u, (R̃ gi)_u>
        rows_dot(prev_u, cur_u.view(), &mut row_term);

        if l > 1 {
            propagate_items_into(&norm, gu.view(), &mut cur_i);
            add_sparse_rows(&mut cur_u, &grad_z_users, alpha[l - 1]);
            add_sparse_rows(&mut cur_i, &grad_z_items, alpha[l - 1]);
            gu = cur_u;
            gi = cur_i;
        }
    }

    // Chain through R̃_{u,j} = a_u R_{u,j} b_j.
    let a = norm.user_scale();
    let b_t = norm.item_scale()[target];
    let target_has_edges = graph.item_degree(target) >= 1;
    let col_offset = if target_has_edges {
        -0.5 * b_t * b_t * col_term
    } else {
        0.0
    };
    let gradients = (0..m)
        .map(|u| {
            let mut g = a[u] * b_t * column[u] + col_offset;
            if graph.user_degree(u) >= 1 {
                g -= 0.5 * a[u] * a[u] * row_term[u];
            }
            g
        })
        .collect();
    let candidates = (0..m).map(|u| !graph.contains(u, target)).collect();
    Ok(SaliencyColumn {
        target_item: target,
        gradients,
        candidates,
    })
}

/// Share of users whose gradient on the target column beats every other
/// column of their row. Uses the dense reference, so keep instances small.
pub fn target_column_dominance(
    model: &TrainedModel,
    graph: &InteractionMatrix,
    target: usize,
    masked: &MaskedUserSet,
    lambda: f64,
    k: usize,
) -> Result<f64> {
    let full = grad_full(model, graph, target, masked, lambda, k)?;
    if graph.num_items() < 2 {
        return Ok(1.0);
    }
    let dominant = full
        .axis_iter(Axis(0))
        .filter(|row| {
            let best_other = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != target)
                .map(|(_, &g)| g)
                .fold(f64::NEG_INFINITY, f64::max);
            row[target] > best_other
        })
        .count();
    Ok(dominant as f64 / graph.num_users() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{attack_objective, objective_from_embeddings};
    use crate::model::{init_embeddings, ModelConfig};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn everyone(m: usize) -> MaskedUserSet {
        MaskedUserSet {
            users: (0..m).collect(),
            gamma: 0.0,
            fallback: false,
        }
    }

    fn model_for(m: usize, n: usize, layers: usize, d: usize, seed: u64, std: f64) -> TrainedModel {
        let mut cfg = ModelConfig::new(layers, d);
        cfg.seed = seed;
        cfg.init_std = std;
        let e = init_embeddings(&cfg, m, n);
        TrainedModel::new(cfg, e).unwrap()
    }

    #[test]
    fn zero_layers_gives_zero_gradient() {
        let r = InteractionMatrix::from_pairs(3, 4, [(0, 1), (1, 2), (2, 0)]).unwrap();
        let model = model_for(3, 4, 0, 2, 1, 1.0);
        let full = grad_full(&model, &r, 3, &everyone(3), 0.5, 2).unwrap();
        assert!(full.iter().all(|&g| g == 0.0));
        let col = grad_target_column(&model, &r, 3, &everyone(3), 0.5, 2).unwrap();
        assert!(col.gradients.iter().all(|&g| g == 0.0));
        assert_eq!(col.candidates, vec![true, true, true]);
    }

    #[test]
    fn one_by_one_hand_derivation() {
        // R = [[x]]: R̃ = x / (sqrt(x) sqrt(x)) = 1 for x >= 1, so the
        // right derivative at x = 1 is zero.
        let r = InteractionMatrix::from_pairs(1, 1, [(0, 0)]).unwrap();
        let mut cfg = ModelConfig::new(1, 1);
        cfg.layer_weights = vec![0.5, 0.5];
        let model = TrainedModel::new(
            cfg,
            EmbeddingTable::new(array![[0.7]], array![[1.3]]).unwrap(),
        )
        .unwrap();
        let masked = everyone(1);
        let full = grad_full(&model, &r, 0, &masked, 1.0, 1).unwrap();
        assert!(full[[0, 0]].abs() < 1e-15);

        let r = InteractionMatrix::from_pairs(1, 2, [(0, 0)]).unwrap();
        let mut cfg = ModelConfig::new(1, 1);
        cfg.layer_weights = vec![0.5, 0.5];
        let (wu, wi0, wi1) = (0.7, 1.3, -0.4);
        let model = TrainedModel::new(
            cfg,
            EmbeddingTable::new(array![[wu]], array![[wi0], [wi1]]).unwrap(),
        )
        .unwrap();
        // λ = 1 keeps only the target term, target = item 1 (currently absent).
        let col = grad_target_column(&model, &r, 1, &masked, 1.0, 1).unwrap();
        let full = grad_full(&model, &r, 1, &masked, 1.0, 1).unwrap();
        // f(x) with R = [[1, x]]: d_u = 1 + x, d_0 = 1, d_1 = max(x, 1) = 1 near 0+.
        // R̃_{0,1} = x / sqrt(1+x), z_u = (wu + R̃_00 wi0 + R̃_01 wi1)/2 with
        // R̃_00 = 1/sqrt(1+x); z_1 = (wi1 + R̃_01 wu)/2.
        // At x = 0: dR̃_00/dx = -1/2, dR̃_01/dx = 1.
        // dz_u/dx = (-wi0/2 + wi1)/2, dz_1/dx = wu/2, z_u = (wu + wi0)/2, z_1 = wi1/2.
        let zu = (wu + wi0) / 2.0;
        let z1 = wi1 / 2.0;
        let ds = ((-wi0 / 2.0 + wi1) / 2.0) * z1 + zu * (wu / 2.0);
        let expect = sigmoid(-(zu * z1)) * ds;
        assert!(
            (col.gradients[0] - expect).abs() < 1e-12,
            "{} vs {expect}",
            col.gradients[0]
        );
        assert!((full[[0, 1]] - expect).abs() < 1e-12);
    }

    /// Random instance with every degree either 0 or >= 2, so that central
    /// differences never straddle the clamp at degree 1.
    pub(crate) fn smooth_instance(
        seed: u64,
    ) -> (
        InteractionMatrix,
        TrainedModel,
        usize,
        MaskedUserSet,
        f64,
        usize,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let m = rng.random_range(3..=10);
            let n = rng.random_range(3..=10);
            let pairs: Vec<_> = (0..m)
                .flat_map(|u| (0..n).map(move |i| (u, i)))
                .filter(|_| rng.random::<f64>() < 0.45)
                .collect();
            let r = InteractionMatrix::from_pairs(m, n, pairs).unwrap();
            let ok = (0..m).all(|u| r.user_degree(u) != 1) && (0..n).all(|i| r.item_degree(i) != 1);
            if !ok {
                continue;
            }
            let layers = rng.random_range(0..=2);
            let d = rng.random_range(1..=4);
            let model = model_for(m, n, layers, d, seed, 0.8);
            let t = rng.random_range(0..n);
            let users: Vec<usize> = (0..m).filter(|_| rng.random::<f64>() < 0.6).collect();
            let users = if users.is_empty() { vec![0] } else { users };
            let masked = MaskedUserSet {
                users,
                gamma: 0.5,
                fallback: false,
            };
            let lambda = rng.random::<f64>();
            let k = rng.random_range(1..=3);
            return (r, model, t, masked, lambda, k);
        }
    }

    fn relaxed_objective(model: &TrainedModel, dense: &Array2<f64>, terms: &ObjectiveTerms) -> f64 {
        // Independent dense forward on a real-valued R.
        let (m, n) = dense.dim();
        let mut rt = dense.clone();
        let du: Vec<f64> = (0..m).map(|u| dense.row(u).sum()).collect();
        let di: Vec<f64> = (0..n).map(|i| dense.column(i).sum()).collect();
        for ((u, i), v) in rt.indexed_iter_mut() {
            *v /= (du[u].max(1.0) * di[i].max(1.0)).sqrt();
        }
        let alpha = &model.config.layer_weights;
        let (mut zu, mut zi) = (
            model.embeddings.users.clone(),
            model.embeddings.items.clone(),
        );
        let mut su = &zu * alpha[0];
        let mut si = &zi * alpha[0];
        for &w in &alpha[1..] {
            let nu = rt.dot(&zi);
            let ni = rt.t().dot(&zu);
            zu = nu;
            zi = ni;
            su.scaled_add(w, &zu);
            si.scaled_add(w, &zi);
        }
        objective_from_embeddings(
            &EmbeddingTable {
                users: su,
                items: si,
            },
            terms,
        )
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let h = 1e-4;
        for seed in 0..12 {
            let (r, model, t, masked, lambda, k) = smooth_instance(seed);
            let full = grad_full(&model, &r, t, &masked, lambda, k).unwrap();
            let z = model.embed(&r).unwrap();
            let terms = ObjectiveTerms::build(&z, &r, t, &masked, lambda, k).unwrap();
            let base = r.to_dense();
            for ((u, j), &g) in full.indexed_iter() {
                let mut plus = base.clone();
                plus[[u, j]] += h;
                let mut minus = base.clone();
                minus[[u, j]] -= h;
                let fd = (relaxed_objective(&model, &plus, &terms)
                    - relaxed_objective(&model, &minus, &terms))
                    / (2.0 * h);
                let err = (fd - g).abs();
                let rel = err / fd.abs().max(g.abs()).max(1e-12);
                assert!(
                    rel < 1e-4 || err < 1e-9,
                    "seed {seed} ({u},{j}): fd {fd} vs {g}"
                );
            }
        }
    }

    #[test]
    fn column_path_matches_full_gradient() {
        for seed in 0..25 {
            let (r, model, t, masked, lambda, k) = smooth_instance(seed + 100);
            let full = grad_full(&model, &r, t, &masked, lambda, k).unwrap();
            let col = grad_target_column(&model, &r, t, &masked, lambda, k).unwrap();
            for u in 0..r.num_users() {
                assert!(
                    (full[[u, t]] - col.gradients[u]).abs() < 1e-9,
                    "seed {seed} user {u}: {} vs {}",
                    full[[u, t]],
                    col.gradients[u]
                );
                assert_eq!(col.candidates[u], !r.contains(u, t));
            }
        }
    }

    #[test]
    fn column_path_handles_degree_one_and_cold_nodes() {
        // degree-1 and degree-0 users/items, target item with no edges
        let r = InteractionMatrix::from_pairs(5, 4, [(0, 0), (1, 0), (1, 1), (3, 2)]).unwrap();
        for layers in 0..=3 {
            let model = model_for(5, 4, layers, 3, 9, 1.0);
            for t in 0..4 {
                let masked = everyone(5);
                let full = grad_full(&model, &r, t, &masked, 0.4, 2).unwrap();
                let col = grad_target_column(&model, &r, t, &masked, 0.4, 2).unwrap();
                for u in 0..5 {
                    assert!((full[[u, t]] - col.gradients[u]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn objective_unchanged_by_gradient_bookkeeping() {
        let (r, model, t, masked, lambda, k) = smooth_instance(3);
        let a = attack_objective(&model, &r, t, &masked, lambda, k).unwrap();
        let z = model.embed(&r).unwrap();
        let terms = ObjectiveTerms::build(&z, &r, t, &masked, lambda, k).unwrap();
        let b = relaxed_objective(&model, &r.to_dense(), &terms);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dominance_fraction_in_unit_interval() {
        let (r, model, t, masked, lambda, k) = smooth_instance(8);
        let f = target_column_dominance(&model, &r, t, &masked, lambda, k).unwrap();
        assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn saliency_csv() {
        let s = SaliencyColumn {
            target_item: 0,
            gradients: vec![0.5, -1.0],
            candidates: vec![true, false],
        };
        let csv = s.to_csv(&[0]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "user_index,gradient,selected");
        assert!(lines[1].starts_with("0,5.0") && lines[1].ends_with(",1"));
        assert!(lines[2].ends_with(",0"));
    }
}
