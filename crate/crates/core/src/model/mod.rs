//! LightGCN-style forward model: linear propagation over the normalized
//! bipartite graph, weighted layer combination and inner-product scoring.

mod checkpoint;
pub(crate) mod forward;
mod metrics;
mod topk;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{InteractionMatrix, NormalizedMatrix};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{combine, propagate, propagate_items, propagate_users};
pub use metrics::{rec_metrics, RecMetrics};
pub use topk::{recommend_for_users, recommend_topk, top_k_indices, RecommendationList};

/// Standard deviation of the Gaussian used for fresh embeddings.
pub const DEFAULT_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    /// One weight per layer `0..=num_layers`.
    pub layer_weights: Vec<f64>,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub batch_size: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    DEFAULT_INIT_STD
}

/// `1/(L+1)` for every layer.
pub fn uniform_layer_weights(num_layers: usize) -> Vec<f64> {
    vec![1.0 / (num_layers + 1) as f64; num_layers + 1]
}

impl ModelConfig {
    pub fn new(num_layers: usize, embed_dim: usize) -> Self {
        Self {
            num_layers,
            embed_dim,
            layer_weights: uniform_layer_weights(num_layers),
            seed: 2020,
            epochs: 1000,
            learning_rate: 1e-3,
            l2_reg: 1e-4,
            batch_size: 2048,
            init_std: DEFAULT_INIT_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::InvalidArgument("embed_dim must be positive".into()));
        }
        if self.layer_weights.len() != self.num_layers + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} layer weights for {} layers",
                self.layer_weights.len(),
                self.num_layers
            )));
        }
        if self
            .layer_weights
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::InvalidArgument(
                "layer weights must be finite and nonnegative".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.l2_reg >= 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "learning_rate > 0, l2_reg >= 0 and batch_size > 0 required".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(3, 64)
    }
}

/// User and item tables, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(users: Array2<f64>, items: Array2<f64>) -> Result<Self> {
        if users.ncols() != items.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "user dim {} vs item dim {}",
                users.ncols(),
                items.ncols()
            )));
        }
        Ok(Self { users, items })
    }

    pub fn num_users(&self) -> usize {
        self.users.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.items.nrows()
    }

    pub fn dim(&self) -> usize {
        self.users.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.users
            .iter()
            .chain(self.items.iter())
            .all(|v| v.is_finite())
    }

    /// Rounds every entry to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        self.users.mapv_inplace(|v| v as f32 as f64);
        self.items.mapv_inplace(|v| v as f32 as f64);
    }
}

/// Gaussian `N(0, init_std^2)` tables drawn from `config.seed`. Values are
/// rounded to `f32` so a checkpoint reproduces them exactly.
pub fn init_embeddings(config: &ModelConfig, num_users: usize, num_items: usize) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std).expect("init_std must be finite and >= 0");
    let d = config.embed_dim;
    let users = Array2::from_shape_fn((num_users, d), |_| normal.sample(&mut rng) as f32 as f64);
    let items = Array2::from_shape_fn((num_items, d), |_| normal.sample(&mut rng) as f32 as f64);
    EmbeddingTable { users, items }
}

/// Trained parameters together with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub embeddings: EmbeddingTable,
}

impl TrainedModel {
    pub fn new(config: ModelConfig, embeddings: EmbeddingTable) -> Result<Self> {
        config.validate()?;
        if embeddings.dim() != config.embed_dim {
            return Err(Error::DimensionMismatch(format!(
                "embedding dim {} vs config {}",
                embeddings.dim(),
                config.embed_dim
            )));
        }
        Ok(Self { config, embeddings })
    }

    pub fn num_users(&self) -> usize {
        self.embeddings.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.embeddings.num_items()
    }

    /// Final (combined) embeddings of this model's parameters on `graph`.
    pub fn embed(&self, graph: &InteractionMatrix) -> Result<EmbeddingTable> {
        let norm = NormalizedMatrix::from_matrix(graph);
        self.embed_normalized(&norm)
    }

    pub fn embed_normalized(&self, norm: &NormalizedMatrix<'_>) -> Result<EmbeddingTable> {
        let layers = propagate(norm, &self.embeddings, self.config.num_layers)?;
        combine(&layers, &self.config.layer_weights)
    }
}

/// `<z_u, z_i>` on final embeddings.
pub fn score(table: &EmbeddingTable, u: usize, i: usize) -> Result<f64> {
    check_user(table, u)?;
    if i >= table.num_items() {
        return Err(Error::OutOfRange {
            what: "item",
            index: i,
            limit: table.num_items(),
        });
    }
    Ok(table.users.row(u).dot(&table.items.row(i)))
}

/// Scores of user `u` against every item.
pub fn score_all_items(table: &EmbeddingTable, u: usize) -> Result<Vec<f64>> {
    check_user(table, u)?;
    Ok(table.items.dot(&table.users.row(u)).to_vec())
}

fn check_user(table: &EmbeddingTable, u: usize) -> Result<()> {
    if u >= table.num_users() {
        return Err(Error::OutOfRange {
            what: "user",
            index: u,
            limit: table.num_users(),
        });
    }
    Ok(())
}
