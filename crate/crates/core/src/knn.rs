//! Exact k-nearest-neighbor retrieval over latent embeddings, and LSB
//! expansion of a seed set against an unlabeled pool.
//!
//! Retrieval is brute force by design: every downstream number stays
//! oracle-checkable. Candidates are ordered by (distance, id) with distances
//! accumulated in f64, so partitioned parallel execution returns exactly the
//! serial result.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{SampleRecord, SampleSet, SelectionBatch, SelectionEntry, Strategy};
use crate::uncertainty::SeedSet;

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("embedding length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("zero vector has no cosine distance")]
    ZeroVector,
    #[error("seed id {id:?} not resolvable in the labeled set")]
    UnresolvableSeed { id: String },
    #[error("pool is empty")]
    EmptyPool,
}

/// Distance metric over embeddings. Cosine is the default for transformer
/// CLS-style embeddings whose magnitudes are model-dependent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Cosine => f.write_str("cosine"),
            Metric::Euclidean => f.write_str("euclidean"),
        }
    }
}

/// Retrieval configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    pub metric: Metric,
    /// Collapse candidates retrieved by several seeds to their best
    /// (distance, seed id) attribution. With dedupe off, attribution goes to
    /// the first seed (in seed order) that retrieved the candidate; batch ids
    /// stay unique either way.
    pub dedupe: bool,
    /// Drop pool candidates whose id also appears in the labeled set before
    /// ranking.
    pub exclude_labeled: bool,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 3, metric: Metric::Cosine, dedupe: true, exclude_labeled: true }
    }
}

/// One retrieved neighbor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

/// Ranked k-NN result for one query: ascending distance, ties by ascending
/// id, no duplicate candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub query_id: String,
    pub neighbors: Vec<Neighbor>,
}

/// Distance between two embeddings. Euclidean is the L2 norm of the
/// difference; cosine is `1 - cos(a, b)`, in `[0, 2]`.
pub fn pairwise_distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64, KnnError> {
    if a.len() != b.len() {
        return Err(KnnError::LengthMismatch { left: a.len(), right: b.len() });
    }
    match metric {
        Metric::Euclidean => {
            let mut sum = 0.0;
            for (x, y) in a.iter().zip(b) {
                let d = x - y;
                sum += d * d;
            }
            Ok(sum.sqrt())
        }
        Metric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(KnnError::ZeroVector);
            }
            Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
        }
    }
}

fn neighbor_cmp(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}

/// Bounded selection of the k smallest (distance, id) pairs from one pool
/// partition. Kept as a sorted buffer: k is small and comparisons exact.
struct TopBuffer<'a> {
    k: usize,
    items: Vec<(f64, &'a str)>,
}

impl<'a> TopBuffer<'a> {
    fn new(k: usize) -> Self {
        TopBuffer { k, items: Vec::with_capacity(k + 1) }
    }

    fn push(&mut self, item: (f64, &'a str)) {
        if self.items.len() == self.k {
            if neighbor_cmp(&item, self.items.last().unwrap()) != Ordering::Less {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|x| neighbor_cmp(x, &item) == Ordering::Less);
        self.items.insert(pos, item);
    }

    fn merge(mut self, other: TopBuffer<'a>) -> TopBuffer<'a> {
        for item in other.items {
            self.push(item);
        }
        self
    }
}

fn top_k_by_embedding<'a, F>(
    query_embedding: &[f64],
    pool: &'a SampleSet,
    k: usize,
    metric: Metric,
    keep: F,
) -> Result<Vec<(f64, &'a str)>, KnnError>
where
    F: Fn(&SampleRecord) -> bool + Sync,
{
    let results: Result<TopBuffer<'a>, KnnError> = pool
        .records()
        .par_iter()
        .try_fold(
            || TopBuffer::new(k),
            |mut buf, record| {
                if keep(record) {
                    let d = pairwise_distance(query_embedding, &record.embedding, metric)?;
                    buf.push((d, record.id.as_str()));
                }
                Ok(buf)
            },
        )
        .try_reduce(|| TopBuffer::new(k), |a, b| Ok(a.merge(b)));
    Ok(results?.items)
}

/// The k pool records closest to the query, fully ordered by (distance, id).
/// A pool record sharing the query's id is excluded.
pub fn top_k(query: &SampleRecord, pool: &SampleSet, cfg: &KnnConfig) -> Result<NeighborList, KnnError> {
    if pool.is_empty() {
        return Err(KnnError::EmptyPool);
    }
    let items = top_k_by_embedding(&query.embedding, pool, cfg.k, cfg.metric, |record| {
        record.id != query.id
    })?;
    Ok(NeighborList {
        query_id: query.id.clone(),
        neighbors: items
            .into_iter()
            .map(|(distance, id)| Neighbor { id: id.to_string(), distance })
            .collect(),
    })
}

/// Per-seed top-k lists against the pool, before any cross-seed dedupe.
/// Seeds resolve through the labeled set; with `exclude_labeled` set,
/// candidates whose id appears in the labeled set are dropped before ranking.
pub fn per_seed_neighbors(
    seeds: &SeedSet,
    labeled: &SampleSet,
    pool: &SampleSet,
    cfg: &KnnConfig,
) -> Result<Vec<NeighborList>, KnnError> {
    if pool.is_empty() {
        return Err(KnnError::EmptyPool);
    }
    let mut lists = Vec::with_capacity(seeds.len());
    for (seed_id, _) in &seeds.entries {
        let embedding = labeled
            .embedding_of(seed_id)
            .map_err(|_| KnnError::UnresolvableSeed { id: seed_id.clone() })?;
        let items = top_k_by_embedding(embedding, pool, cfg.k, cfg.metric, |record| {
            record.id != *seed_id && !(cfg.exclude_labeled && labeled.contains(&record.id))
        })?;
        lists.push(NeighborList {
            query_id: seed_id.clone(),
            neighbors: items
                .into_iter()
                .map(|(distance, id)| Neighbor { id: id.to_string(), distance })
                .collect(),
        });
    }
    Ok(lists)
}

/// Latent-space broadening: the union over seeds of their top-k pool
/// neighbors, as a batch tagged `lsb`. Entry score is the candidate's
/// distance to its attributed seed.
pub fn lsb_expand(
    seeds: &SeedSet,
    labeled: &SampleSet,
    pool: &SampleSet,
    cfg: &KnnConfig,
) -> Result<SelectionBatch, KnnError> {
    let lists = per_seed_neighbors(seeds, labeled, pool, cfg)?;
    // candidate id -> (distance, seed id): best attribution under dedupe,
    // first-seed attribution otherwise.
    let mut best: HashMap<&str, (f64, &str)> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for list in &lists {
        for neighbor in &list.neighbors {
            let key = (neighbor.distance, list.query_id.as_str());
            match best.entry(neighbor.id.as_str()) {
                std::collections::hash_map::Entry::Vacant(slot) => {
                    slot.insert(key);
                    order.push(neighbor.id.as_str());
                }
                std::collections::hash_map::Entry::Occupied(mut slot) => {
                    if cfg.dedupe && neighbor_cmp(&key, slot.get()) == Ordering::Less {
                        slot.insert(key);
                    }
                }
            }
        }
    }
    // Batch order: ascending (distance, candidate id) for a stable, ranked
    // work order.
    let mut entries: Vec<(f64, &str, &str)> =
        order.into_iter().map(|id| { let (d, s) = best[id]; (d, id, s) }).collect();
    entries.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let entries = entries
        .into_iter()
        .map(|(distance, id, seed)| SelectionEntry {
            id: id.to_string(),
            score: distance,
            seed_id: Some(seed.to_string()),
            lookalike_score: None,
        })
        .collect();
    Ok(SelectionBatch::new(0, Strategy::Lsb, entries).expect("deduped ids are unique"))
}
