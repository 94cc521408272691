//! Pairwise ranking (BPR) training through the full propagation stack.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{InteractionMatrix, NormalizedMatrix};
use crate::error::{Error, Result};
use crate::model::{
    combine, init_embeddings, propagate, propagate_items, propagate_users, EmbeddingTable,
    ModelConfig, TrainedModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainTriple {
    pub user: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws `count` triples: user uniform over users with at least one positive
/// and one negative, positive uniform over the user's items, negative by
/// rejection sampling over the rest.
pub fn sample_triples<R: Rng + ?Sized>(
    matrix: &InteractionMatrix,
    count: usize,
    rng: &mut R,
) -> Vec<TrainTriple> {
    let n = matrix.num_items();
    let eligible: Vec<usize> = (0..matrix.num_users())
        .filter(|&u| {
            let d = matrix.user_degree(u);
            d > 0 && d < n
        })
        .collect();
    if eligible.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let user = eligible[rng.random_range(0..eligible.len())];
            let items = matrix.user_items(user);
            let positive = items[rng.random_range(0..items.len())] as usize;
            let negative = loop {
                let j = rng.random_range(0..n);
                if items.binary_search(&(j as u32)).is_err() {
                    break j;
                }
            };
            TrainTriple {
                user,
                positive,
                negative,
            }
        })
        .collect()
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean BPR loss over `triples` and its gradient w.r.t. the layer-0 tables.
///
/// Per triple: `-log σ(r̂_ui - r̂_uj) + l2 (|w_u|² + |w_i|² + |w_j|²) / 2`.
pub fn bpr_loss_and_gradient(
    embeddings: &EmbeddingTable,
    norm: &NormalizedMatrix<'_>,
    layer_weights: &[f64],
    triples: &[TrainTriple],
    l2: f64,
) -> Result<(f64, EmbeddingTable)> {
    let num_layers = layer_weights
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::InvalidArgument("no layer weights".into()))?;
    let layers = propagate(norm, embeddings, num_layers)?;
    let z = combine(&layers, layer_weights)?;
    drop(layers);

    let mut grad_z = EmbeddingTable {
        users: Array2::zeros(z.users.raw_dim()),
        items: Array2::zeros(z.items.raw_dim()),
    };
    let mut grad = EmbeddingTable {
        users: Array2::zeros(z.users.raw_dim()),
        items: Array2::zeros(z.items.raw_dim()),
    };
    if triples.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / triples.len() as f64;
    let d = z.users.ncols();
    let zu_all = z.users.as_slice().expect("standard layout");
    let zi_all = z.items.as_slice().expect("standard layout");
    let eu_all = embeddings.users.as_slice().expect("standard layout");
    let ei_all = embeddings.items.as_slice().expect("standard layout");
    let gzu = grad_z.users.as_slice_mut().expect("standard layout");
    let gzi = grad_z.items.as_slice_mut().expect("standard layout");
    let gu = grad.users.as_slice_mut().expect("standard layout");
    let gi = grad.items.as_slice_mut().expect("standard layout");
    let row = |r: usize| r * d..r * d + d;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut loss = 0.0;
    for t in triples {
        let (ru, ri, rj) = (row(t.user), row(t.positive), row(t.negative));
        let (zu, zi, zj) = (&zu_all[ru.clone()], &zi_all[ri.clone()], &zi_all[rj.clone()]);
        let diff = dot(zu, zi) - dot(zu, zj);
        loss += softplus(-diff);
        // d/dx softplus(-x) = -σ(-x)
        let g = -crate::attack::sigmoid(-diff) * scale;
        for k in 0..d {
            gzu[ru.start + k] += g * (zi[k] - zj[k]);
            gzi[ri.start + k] += g * zu[k];
            gzi[rj.start + k] -= g * zu[k];
        }
        let (eu, ei, ej) = (&eu_all[ru.clone()], &ei_all[ri.clone()], &ei_all[rj.clone()]);
        loss += 0.5 * l2 * (dot(eu, eu) + dot(ei, ei) + dot(ej, ej));
        let w = l2 * scale;
        for k in 0..d {
            gu[ru.start + k] += w * eu[k];
            gi[ri.start + k] += w * ei[k];
            gi[rj.start + k] += w * ej[k];
        }
    }

    // z = Σ α_l A^l E0 with A self-adjoint, so dE0 = Σ α_l A^l dz (Horner form).
    let mut acc = EmbeddingTable {
        users: &grad_z.users * layer_weights[num_layers],
        items: &grad_z.items * layer_weights[num_layers],
    };
    for l in (0..num_layers).rev() {
        let mut users = propagate_users(norm, acc.items.view());
        let mut items = propagate_items(norm, acc.users.view());
        users.scaled_add(layer_weights[l], &grad_z.users);
        items.scaled_add(layer_weights[l], &grad_z.items);
        acc = EmbeddingTable { users, items };
    }
    grad.users += &acc.users;
    grad.items += &acc.items;
    Ok((loss * scale, grad))
}

/// Adam state over both embedding tables.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: EmbeddingTable,
    second: EmbeddingTable,
}

impl Adam {
    pub fn new(learning_rate: f64, shape: &EmbeddingTable) -> Self {
        let zeros = EmbeddingTable {
            users: Array2::zeros(shape.users.raw_dim()),
            items: Array2::zeros(shape.items.raw_dim()),
        };
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn apply(&mut self, params: &mut EmbeddingTable, grad: &EmbeddingTable) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.learning_rate, self.eps);
        let update =
            |p: &mut Array2<f64>, g: &Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>| {
                ndarray::Zip::from(p)
                    .and(g)
                    .and(m)
                    .and(v)
                    .for_each(|p, &g, m, v| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
            };
        update(
            &mut params.users,
            &grad.users,
            &mut self.first.users,
            &mut self.second.users,
        );
        update(
            &mut params.items,
            &grad.items,
            &mut self.first.items,
            &mut self.second.items,
        );
    }
}

/// One optimizer step on a batch; returns the batch's mean loss.
pub fn bpr_step(
    embeddings: &mut EmbeddingTable,
    optimizer: &mut Adam,
    norm: &NormalizedMatrix<'_>,
    layer_weights: &[f64],
    triples: &[TrainTriple],
    l2: f64,
) -> Result<f64> {
    let (loss, grad) = bpr_loss_and_gradient(embeddings, norm, layer_weights, triples, l2)?;
    optimizer.apply(embeddings, &grad);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub elapsed_ms: u128,
}

impl EpochStats {
    /// `epoch,loss,elapsed_ms`
    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{}", self.epoch, self.loss, self.elapsed_ms)
    }
}

pub fn train(matrix: &InteractionMatrix, config: &ModelConfig) -> Result<TrainedModel> {
    train_with_progress(matrix, config, |_| {})
}

/// Runs `config.epochs` epochs of `ceil(|E| / batch_size)` steps each.
/// `progress` sees one record per finished epoch.
pub fn train_with_progress(
    matrix: &InteractionMatrix,
    config: &ModelConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainedModel> {
    config.validate()?;
    let mut embeddings = init_embeddings(config, matrix.num_users(), matrix.num_items());
    let norm = NormalizedMatrix::from_matrix(matrix);
    let mut optimizer = Adam::new(config.learning_rate, &embeddings);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let per_epoch = matrix.nnz().max(1);
    let start = Instant::now();
    for epoch in 1..=config.epochs {
        let triples = sample_triples(matrix, per_epoch, &mut rng);
        let mut total = 0.0;
        for batch in triples.chunks(config.batch_size) {
            let loss = bpr_step(
                &mut embeddings,
                &mut optimizer,
                &norm,
                &config.layer_weights,
                batch,
                config.l2_reg,
            )?;
            total += loss * batch.len() as f64;
        }
        let loss = if triples.is_empty() {
            0.0
        } else {
            total / triples.len() as f64
        };
        if !loss.is_finite() || !embeddings.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, loss });
        }
        progress(&EpochStats {
            epoch,
            loss,
            elapsed_ms: start.elapsed().as_millis(),
        });
    }
    embeddings.round_to_f32();
    TrainedModel::new(config.clone(), embeddings)
}
