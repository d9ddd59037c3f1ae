//! Relative frequency of each contrastive species per target and rank.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloudio::Species;
use crate::error::Result;

/// Contrastive classes of one saliency map, most similar first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveRecord {
    pub target: Species,
    pub contrastive: Vec<Species>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub target: Species,
    /// 1-based.
    pub rank: usize,
    pub contrastive: Species,
    pub count: u64,
    pub frequency: f64,
}

/// Rows ordered by target, rank and contrastive species; only observed
/// combinations appear. Frequencies within a (target, rank) sum to 1.
pub fn contrastive_frequency(records: &[ContrastiveRecord]) -> Vec<FrequencyRow> {
    let mut counts: BTreeMap<(Species, usize), BTreeMap<Species, u64>> = BTreeMap::new();
    for r in records {
        for (k, &c) in r.contrastive.iter().enumerate() {
            *counts
                .entry((r.target, k + 1))
                .or_default()
                .entry(c)
                .or_default() += 1;
        }
    }
    counts
        .into_iter()
        .flat_map(|((target, rank), by)| {
            let total: u64 = by.values().sum();
            by.into_iter()
                .map(move |(contrastive, count)| FrequencyRow {
                    target,
                    rank,
                    contrastive,
                    count,
                    frequency: count as f64 / total as f64,
                })
        })
        .collect()
}

pub fn write_frequency_csv(path: &Path, rows: &[FrequencyRow]) -> Result<()> {
    super::write_serialized(path, rows)
}
