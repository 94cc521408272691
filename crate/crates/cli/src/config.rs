use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gcnpromo::attack::AttackConfig;
use gcnpromo::eval::{AttackMethod, Protocol};
use gcnpromo::model::ModelConfig;
use gcnpromo::seeds::{component_seed, Component};
use serde::{Deserialize, Serialize};

pub const SEED_RULE: &str = "component c uses ChaCha8 seeded with `seed` on stream c \
     (data=1, model=2, targets=3, randfilter=4, victims=5); a derived seed is the \
     first u64 of that stream";

/// Everything a run depends on. Written next to every output so the run can
/// be repeated with `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Victim checkpoints for the blackbox protocol.
    pub victims: Vec<PathBuf>,
    /// Precomputed perturbations; when empty they are crafted.
    pub perturbations: Vec<PathBuf>,
    pub model: ModelConfig,
    pub attack: AttackConfig,
    pub protocol: Protocol,
    pub methods: Vec<AttackMethod>,
    pub item_set: f64,
    pub items: usize,
    /// Explicit targets; when empty, `items` are sampled from the `item_set` bucket.
    pub targets: Vec<usize>,
    pub budget_variant: Option<u8>,
    pub ks: Vec<usize>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
    pub seed_rule: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            seed: component_seed(0, Component::Model),
            ..ModelConfig::default()
        };
        Self {
            data: None,
            test: None,
            checkpoint: None,
            victims: Vec::new(),
            perturbations: Vec::new(),
            model,
            attack: AttackConfig::default(),
            protocol: Protocol::Whitebox,
            methods: vec![AttackMethod::Proposed],
            item_set: 10.0,
            items: 10,
            targets: Vec::new(),
            budget_variant: None,
            ks: vec![50],
            out_dir: PathBuf::from("."),
            seed: 0,
            threads: None,
            seed_rule: SEED_RULE.to_string(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = component_seed(seed, Component::Model);
    }

    pub fn set_budget(&mut self, budget: usize) {
        self.attack.budget = budget;
        self.attack.fallback_pool_size = self.attack.fallback_pool_size.max(budget);
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| crate::usage("--data is required"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn save(&self, name: &str) -> Result<()> {
        let path = self.output(name);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"items": 3, "ks": [10, 20]}"#).unwrap();
        assert_eq!(cfg.items, 3);
        assert_eq!(cfg.ks, vec![10, 20]);
        assert_eq!(cfg.attack, AttackConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(9);
        cfg.set_budget(150);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.attack.fallback_pool_size, 150);
        assert_eq!(back.model.seed, component_seed(9, Component::Model));
    }
}
