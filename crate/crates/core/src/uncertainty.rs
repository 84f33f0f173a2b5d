//! Statistical acquisition functions, expected-score multiclass loss, and
//! seed badcase mining.
//!
//! All three acquisition scores are oriented so that larger means more
//! uncertain; margin is stored negated for this reason. Selection is
//! deterministic: ties break by ascending id everywhere.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{SampleSet, SelectionBatch, SelectionEntry, Strategy};

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("empty probability vector")]
    EmptyProbs,
    #[error("margin needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("label {label} outside [0, {}]", classes - 1)]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("budget {budget} exceeds pool size {available}")]
    BudgetTooLarge { budget: usize, available: usize },
    #[error("record {id:?} has no label")]
    Unlabeled { id: String },
    #[error("no labeled records to mine seeds from")]
    NoLabeledRecords,
}

/// Uncertainty-sampling strategy over the multiclass output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionStrategy {
    LeastConfident,
    Margin,
    MaxEntropy,
}

impl AcquisitionStrategy {
    pub fn tag(self) -> Strategy {
        match self {
            AcquisitionStrategy::LeastConfident => Strategy::LeastConfident,
            AcquisitionStrategy::Margin => Strategy::Margin,
            AcquisitionStrategy::MaxEntropy => Strategy::MaxEntropy,
        }
    }
}

/// Score one probability vector. Least-confident returns `1 - max_c p_c`,
/// margin returns `-(p_(1) - p_(2))` over the two largest entries, and
/// max-entropy returns `-sum p ln p` with `0 ln 0 = 0` (natural log).
pub fn acquisition_score(
    probs: &[f64],
    strategy: AcquisitionStrategy,
) -> Result<f64, UncertaintyError> {
    if probs.is_empty() {
        return Err(UncertaintyError::EmptyProbs);
    }
    match strategy {
        AcquisitionStrategy::LeastConfident => {
            let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok(1.0 - max)
        }
        AcquisitionStrategy::Margin => {
            if probs.len() < 2 {
                return Err(UncertaintyError::TooFewClasses(probs.len()));
            }
            let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &p in probs {
                if p > top {
                    second = top;
                    top = p;
                } else if p > second {
                    second = p;
                }
            }
            Ok(-(top - second))
        }
        AcquisitionStrategy::MaxEntropy => {
            Ok(probs.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum())
        }
    }
}

/// Expectation of the prediction over ordinal classes: `sum_c c * p_c`.
pub fn expected_score(probs: &[f64]) -> f64 {
    probs.iter().enumerate().map(|(c, &p)| c as f64 * p).sum()
}

/// Absolute gap between the prediction's expected ordinal score and the
/// human label, in `[0, C-1]`.
pub fn multiclass_loss(probs: &[f64], label: usize) -> Result<f64, UncertaintyError> {
    if label >= probs.len() {
        return Err(UncertaintyError::LabelOutOfRange { label, classes: probs.len() });
    }
    Ok((expected_score(probs) - label as f64).abs())
}

/// Pick the `budget` most uncertain records under one strategy. Ordering is
/// (score descending, id ascending); repeated calls are identical.
pub fn select_statistical(
    set: &SampleSet,
    strategy: AcquisitionStrategy,
    budget: usize,
) -> Result<SelectionBatch, UncertaintyError> {
    if budget > set.len() {
        return Err(UncertaintyError::BudgetTooLarge { budget, available: set.len() });
    }
    let mut scored: Vec<(f64, &str)> = set
        .records()
        .par_iter()
        .map(|r| acquisition_score(&r.probs, strategy).map(|s| (s, r.id.as_str())))
        .collect::<Result<_, _>>()?;
    sort_desc_by_score_then_id(&mut scored);
    let entries = scored
        .into_iter()
        .take(budget)
        .map(|(score, id)| SelectionEntry {
            id: id.to_string(),
            score,
            seed_id: None,
            lookalike_score: None,
        })
        .collect();
    Ok(SelectionBatch::new(0, strategy.tag(), entries).expect("ids unique within a set"))
}

/// Budget split across the three statistical strategies. The default mirrors
/// the 96:56:181 least-confident : margin : max-entropy mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixRatio {
    pub least_confident: u32,
    pub margin: u32,
    pub max_entropy: u32,
}

impl Default for MixRatio {
    fn default() -> Self {
        MixRatio { least_confident: 96, margin: 56, max_entropy: 181 }
    }
}

impl MixRatio {
    /// Largest-remainder apportionment of `budget` into the three quotas.
    pub fn split(&self, budget: usize) -> [usize; 3] {
        let weights =
            [self.least_confident as f64, self.margin as f64, self.max_entropy as f64];
        let total: f64 = weights.iter().sum();
        if total == 0.0 || budget == 0 {
            return [0, 0, 0];
        }
        let exact: Vec<f64> = weights.iter().map(|w| budget as f64 * w / total).collect();
        let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut assigned: usize = quota.iter().sum();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut i = 0;
        while assigned < budget {
            quota[order[i % 3]] += 1;
            assigned += 1;
            i += 1;
        }
        [quota[0], quota[1], quota[2]]
    }
}

/// A mixed statistical selection: one batch per strategy with a nonzero
/// quota, quotas filled in least-confident, margin, max-entropy order with
/// ids already taken by an earlier strategy (or listed in `exclude`)
/// skipped.
pub fn select_statistical_mix(
    set: &SampleSet,
    budget: usize,
    ratio: MixRatio,
    exclude: &std::collections::HashSet<String>,
) -> Result<Vec<SelectionBatch>, UncertaintyError> {
    if budget + exclude.len() > set.len() {
        return Err(UncertaintyError::BudgetTooLarge { budget, available: set.len() });
    }
    let quotas = ratio.split(budget);
    let strategies = [
        AcquisitionStrategy::LeastConfident,
        AcquisitionStrategy::Margin,
        AcquisitionStrategy::MaxEntropy,
    ];
    let mut taken = exclude.clone();
    let mut batches = Vec::new();
    for (strategy, &quota) in strategies.iter().zip(&quotas) {
        if quota == 0 {
            continue;
        }
        let full = select_statistical(set, *strategy, set.len())?;
        let entries: Vec<SelectionEntry> =
            full.entries.into_iter().filter(|e| !taken.contains(&e.id)).take(quota).collect();
        for entry in &entries {
            taken.insert(entry.id.clone());
        }
        batches.push(SelectionBatch::new(0, strategy.tag(), entries).expect("unique"));
    }
    Ok(batches)
}

/// Seed badcase mining rule: either keep losses strictly above a threshold,
/// or keep the top quantile by loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedRule {
    Threshold(f64),
    Quantile(f64),
}

impl Default for SeedRule {
    fn default() -> Self {
        // The threshold form has no scale-free default; the quantile form is
        // corpus-size invariant.
        SeedRule::Quantile(0.03)
    }
}

/// Mined seed badcases: ids with their multiclass loss, plus the rule used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    pub rule: SeedRule,
    pub entries: Vec<(String, f64)>,
}

impl SeedSet {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Mine seed badcases from the labeled records of `set`. Threshold mode
/// keeps loss > s_t; quantile mode keeps the top `ceil(q * N)` by loss,
/// ties by ascending id. Errors if no record is labeled.
pub fn select_seeds(set: &SampleSet, rule: SeedRule) -> Result<SeedSet, UncertaintyError> {
    let mut losses: Vec<(f64, &str)> = Vec::new();
    for record in set.records() {
        if let Some(label) = record.label {
            losses.push((multiclass_loss(&record.probs, label)?, record.id.as_str()));
        }
    }
    if losses.is_empty() {
        return Err(UncertaintyError::NoLabeledRecords);
    }
    let entries: Vec<(String, f64)> = match rule {
        SeedRule::Threshold(s_t) => {
            let mut kept: Vec<(f64, &str)> =
                losses.into_iter().filter(|(loss, _)| *loss > s_t).collect();
            sort_desc_by_score_then_id(&mut kept);
            kept.into_iter().map(|(loss, id)| (id.to_string(), loss)).collect()
        }
        SeedRule::Quantile(q) => {
            let count = (q * losses.len() as f64).ceil() as usize;
            sort_desc_by_score_then_id(&mut losses);
            losses.into_iter().take(count).map(|(loss, id)| (id.to_string(), loss)).collect()
        }
    };
    Ok(SeedSet { rule, entries })
}

fn sort_desc_by_score_then_id(items: &mut [(f64, &str)]) {
    items.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
}
