use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Protocol, QualityAudit};
use crate::error::{Error, Result};
use crate::model::RecMetrics;

/// How pruned hits are counted, repeated in every report.
pub const PHN_DEFINITION: &str =
    "phn counts hits among users not connected to the target by the perturbation";

/// One (target item, attack, K, evaluated model) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionResult {
    pub attack: String,
    pub target_item: usize,
    pub budget: usize,
    /// Edges actually added, at most `budget`.
    pub edits: usize,
    pub k: usize,
    /// Seed of the evaluated model.
    pub seed: u64,
    pub hn: usize,
    pub phn: usize,
    /// Test-split quality of the evaluated model on the perturbed graph.
    pub quality: Option<RecMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: String,
    pub k: usize,
    pub seed: u64,
    pub items: usize,
    pub mean_hn: f64,
    pub mean_phn: f64,
    pub mean_quality: Option<RecMetrics>,
}

/// Promoted target against clean items that end up with the same degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanComparison {
    pub attack: String,
    pub target_item: usize,
    pub k: usize,
    pub degree: usize,
    pub target_phn: usize,
    pub clean_items: usize,
    pub clean_mean_hn: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub protocol: Protocol,
    pub item_set: f64,
    pub budget_variant: Option<u8>,
    pub phn_definition: String,
    pub rows: Vec<PromotionResult>,
    pub summary: Vec<AttackSummary>,
    /// Clean-graph quality per (K, model seed), when a test split was given.
    pub baseline_quality: Vec<(usize, u64, RecMetrics)>,
    pub clean_comparisons: Vec<CleanComparison>,
    pub audits: Vec<QualityAudit>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    dataset: &'a str,
    protocol: &'a str,
    attack: &'a str,
    item_set: f64,
    budget: usize,
    #[serde(rename = "K")]
    k: usize,
    target_item: usize,
    seed: u64,
    hn: usize,
    phn: usize,
    precision: Option<f64>,
    recall: Option<f64>,
    ndcg: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl ExperimentReport {
    pub fn new(
        dataset: impl Into<String>,
        protocol: Protocol,
        item_set: f64,
        budget_variant: Option<u8>,
        rows: Vec<PromotionResult>,
    ) -> Self {
        let mut report = Self {
            dataset: dataset.into(),
            protocol,
            item_set,
            budget_variant,
            phn_definition: PHN_DEFINITION.to_string(),
            rows,
            summary: Vec::new(),
            baseline_quality: Vec::new(),
            clean_comparisons: Vec::new(),
            audits: Vec::new(),
        };
        report.summarize();
        report
    }

    /// Recomputes per-(attack, K, seed) means over rows.
    pub fn summarize(&mut self) {
        let mut groups: BTreeMap<(String, usize, u64), Vec<&PromotionResult>> = BTreeMap::new();
        for row in &self.rows {
            groups
                .entry((row.attack.clone(), row.k, row.seed))
                .or_default()
                .push(row);
        }
        self.summary = groups
            .into_iter()
            .map(|((attack, k, seed), rows)| {
                let mean_quality = if rows.iter().all(|r| r.quality.is_some()) {
                    let q: Vec<RecMetrics> = rows.iter().filter_map(|r| r.quality).collect();
                    Some(RecMetrics {
                        precision: mean(q.iter().map(|m| m.precision)),
                        recall: mean(q.iter().map(|m| m.recall)),
                        ndcg: mean(q.iter().map(|m| m.ndcg)),
                        users: q.first().map_or(0, |m| m.users),
                    })
                } else {
                    None
                };
                AttackSummary {
                    attack,
                    k,
                    seed,
                    items: rows.len(),
                    mean_hn: mean(rows.iter().map(|r| r.hn as f64)),
                    mean_phn: mean(rows.iter().map(|r| r.phn as f64)),
                    mean_quality,
                }
            })
            .collect();
    }

    /// Mean PHN of one attack at one K, pooled over every evaluated model.
    pub fn mean_phn(&self, attack: &str, k: usize) -> Option<f64> {
        let rows: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.attack == attack && r.k == k)
            .map(|r| r.phn as f64)
            .collect();
        (!rows.is_empty()).then(|| mean(rows.into_iter()))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            writer.serialize(CsvRow {
                dataset: &self.dataset,
                protocol: self.protocol.name(),
                attack: &row.attack,
                item_set: self.item_set,
                budget: row.budget,
                k: row.k,
                target_item: row.target_item,
                seed: row.seed,
                hn: row.hn,
                phn: row.phn,
                precision: row.quality.map(|q| q.precision),
                recall: row.quality.map(|q| q.recall),
                ndcg: row.quality.map(|q| q.ndcg),
            })?;
        }
        if self.rows.is_empty() {
            writer.write_record([
                "dataset",
                "protocol",
                "attack",
                "item_set",
                "budget",
                "K",
                "target_item",
                "seed",
                "hn",
                "phn",
                "precision",
                "recall",
                "ndcg",
            ])?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
