use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use super::EmbeddingTable;
use crate::data::NormalizedMatrix;
use crate::error::{Error, Result};

/// `R̃ · items`, one output row per user.
pub fn propagate_users(norm: &NormalizedMatrix<'_>, items: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((norm.num_users(), items.ncols()));
    propagate_users_into(norm, items, &mut out);
    out
}

/// `R̃ᵀ · users`, one output row per item.
pub fn propagate_items(norm: &NormalizedMatrix<'_>, users: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((norm.num_items(), users.ncols()));
    propagate_items_into(norm, users, &mut out);
    out
}

/// `out = Σ w · source[k]` over the given `(k, w)` pairs.
fn gather(
    out: &mut [f64],
    entries: impl Iterator<Item = (usize, f64)>,
    source: ArrayView2<'_, f64>,
) {
    out.fill(0.0);
    let d = out.len();
    match source.as_slice() {
        Some(flat) => {
            for (k, w) in entries {
                for (o, s) in out.iter_mut().zip(&flat[k * d..(k + 1) * d]) {
                    *o += w * s;
                }
            }
        }
        None => {
            for (k, w) in entries {
                for (o, s) in out.iter_mut().zip(source.row(k)) {
                    *o += w * s;
                }
            }
        }
    }
}

/// Overwrites `out` (M×d) with `R̃ · items`.
pub(crate) fn propagate_users_into(
    norm: &NormalizedMatrix<'_>,
    items: ArrayView2<'_, f64>,
    out: &mut Array2<f64>,
) {
    assert_eq!(out.dim(), (norm.num_users(), items.ncols()));
    let d = items.ncols().max(1);
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(d)
        .with_min_len(64)
        .enumerate()
        .for_each(|(u, row)| gather(row, norm.row(u), items));
}

/// Overwrites `out` (N×d) with `R̃ᵀ · users`.
pub(crate) fn propagate_items_into(
    norm: &NormalizedMatrix<'_>,
    users: ArrayView2<'_, f64>,
    out: &mut Array2<f64>,
) {
    assert_eq!(out.dim(), (norm.num_items(), users.ncols()));
    let d = users.ncols().max(1);
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(d)
        .with_min_len(64)
        .enumerate()
        .for_each(|(i, row)| gather(row, norm.column(i), users));
}

/// Layers `0..=num_layers`; layer 0 is a copy of `initial`.
pub fn propagate(
    norm: &NormalizedMatrix<'_>,
    initial: &EmbeddingTable,
    num_layers: usize,
) -> Result<Vec<EmbeddingTable>> {
    if initial.num_users() != norm.num_users() || initial.num_items() != norm.num_items() {
        return Err(Error::DimensionMismatch(format!(
            "graph is {}x{}, embeddings are {}x{}",
            norm.num_users(),
            norm.num_items(),
            initial.num_users(),
            initial.num_items()
        )));
    }
    let mut layers = Vec::with_capacity(num_layers + 1);
    layers.push(initial.clone());
    for _ in 0..num_layers {
        let prev = layers.last().unwrap();
        let users = propagate_users(norm, prev.items.view());
        let items = propagate_items(norm, prev.users.view());
        layers.push(EmbeddingTable { users, items });
    }
    Ok(layers)
}

/// `Σ_l α_l · layer_l`.
pub fn combine(layers: &[EmbeddingTable], weights: &[f64]) -> Result<EmbeddingTable> {
    if layers.len() != weights.len() || layers.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} layers vs {} weights",
            layers.len(),
            weights.len()
        )));
    }
    let mut users = Array2::zeros(layers[0].users.raw_dim());
    let mut items = Array2::zeros(layers[0].items.raw_dim());
    for (layer, &w) in layers.iter().zip(weights) {
        users.scaled_add(w, &layer.users);
        items.scaled_add(w, &layer.items);
    }
    Ok(EmbeddingTable { users, items })
}
