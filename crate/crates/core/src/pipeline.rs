//! End-to-end selection rounds over a synthetic corpus: retrain the
//! reference classifier, rescore, mine seeds, broaden via k-NN, filter by
//! lookalike threshold, assemble the round batch, simulate annotation from
//! withheld oracle labels, and advance the labeled/pool split.
//!
//! The production multimodal backbone is out of scope; a small softmax
//! classifier over the precomputed embeddings stands in for it, which is
//! faithful to the selection machinery since that consumes only
//! (embedding, probability vector, label) triples.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{
    self, DataError, SampleSet, SelectionBatch, SelectionEntry, Strategy,
};
use crate::knn::{lsb_expand, KnnConfig, KnnError};
use crate::lookalike::{
    build_mismatch_dataset, lt_filter, train_lookalike, LookalikeError, LookalikeModel,
    LookalikeTrainConfig,
};
use crate::metrics::{self, EvalReport, MetricError};
use crate::opt::{gradient_descent, GdConfig};
use crate::uncertainty::{
    select_seeds, select_statistical_mix, MixRatio, SeedRule, UncertaintyError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error(transparent)]
    Lookalike(#[from] LookalikeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("round budget {budget} exceeds pool size {pool}")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("lookalike threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("class {0} missing from the labeled set")]
    MissingClass(usize),
    #[error("labeled set is empty")]
    EmptyLabeled,
    #[error("no oracle label for pool id {id:?}")]
    MissingOracle { id: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialize error: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Reference classifier configuration: a softmax regression over embeddings,
/// optionally with one tanh hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefClassifierConfig {
    pub hidden: Option<usize>,
    pub max_iters: usize,
    pub tolerance: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for RefClassifierConfig {
    fn default() -> Self {
        RefClassifierConfig { hidden: None, max_iters: 200, tolerance: 1e-7, l2: 1e-4, seed: 0 }
    }
}

/// The desk-scale stand-in for the production model: emits a probability
/// vector for any embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefClassifier {
    pub embedding_dim: usize,
    pub classes: usize,
    /// Optional hidden layer (weights then biases), tanh activation.
    pub hidden: Option<(Vec<Vec<f64>>, Vec<f64>)>,
    /// Output layer rows per class over the (hidden or raw) features, plus
    /// bias.
    pub output: Vec<Vec<f64>>,
    pub output_bias: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl RefClassifier {
    fn features(&self, embedding: &[f64]) -> Vec<f64> {
        match &self.hidden {
            Some((w, b)) => w
                .iter()
                .zip(b)
                .map(|(row, bias)| {
                    (row.iter().zip(embedding).map(|(x, y)| x * y).sum::<f64>() + bias).tanh()
                })
                .collect(),
            None => embedding.to_vec(),
        }
    }

    /// Probability vector for one embedding.
    pub fn predict_probs(&self, embedding: &[f64]) -> Vec<f64> {
        let features = self.features(embedding);
        let logits: Vec<f64> = self
            .output
            .iter()
            .zip(&self.output_bias)
            .map(|(row, bias)| row.iter().zip(&features).map(|(w, x)| w * x).sum::<f64>() + bias)
            .collect();
        softmax(&logits)
    }

    /// Argmax accuracy over a labeled set.
    pub fn accuracy(&self, set: &SampleSet) -> f64 {
        let mut correct = 0usize;
        let mut counted = 0usize;
        for record in set.records() {
            let Some(label) = record.label else { continue };
            let probs = self.predict_probs(&record.embedding);
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            counted += 1;
            if argmax == label {
                correct += 1;
            }
        }
        correct as f64 / counted.max(1) as f64
    }
}

/// Train the reference classifier on a labeled set. Deterministic given the
/// config; zero iterations leaves the zero-initialized output layer, i.e. a
/// uniform predictor.
pub fn train_reference_classifier(
    set: &SampleSet,
    config: &RefClassifierConfig,
) -> Result<RefClassifier, PipelineError> {
    if set.is_empty() {
        return Err(PipelineError::EmptyLabeled);
    }
    let classes = set.dims().classes;
    let dim = set.dims().embedding;
    let mut present = vec![false; classes];
    let mut data: Vec<(&[f64], usize)> = Vec::with_capacity(set.len());
    for record in set.records() {
        let label = record.label.ok_or_else(|| {
            PipelineError::Lookalike(LookalikeError::Unlabeled { id: record.id.clone() })
        })?;
        present[label] = true;
        data.push((&record.embedding, label));
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(PipelineError::MissingClass(missing));
    }

    let hidden_layer: Option<(Vec<Vec<f64>>, Vec<f64>)> = config.hidden.map(|h| {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let scale = (1.0 / dim as f64).sqrt();
        let w = (0..h)
            .map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect())
            .collect();
        (w, vec![0.0; h])
    });
    let feature_dim = config.hidden.unwrap_or(dim);
    let feature_of = |embedding: &[f64]| -> Vec<f64> {
        match &hidden_layer {
            Some((w, b)) => w
                .iter()
                .zip(b)
                .map(|(row, bias)| {
                    (row.iter().zip(embedding).map(|(x, y)| x * y).sum::<f64>() + bias).tanh()
                })
                .collect(),
            None => embedding.to_vec(),
        }
    };
    let features: Vec<(Vec<f64>, usize)> =
        data.iter().map(|(e, l)| (feature_of(e), *l)).collect();

    // params: classes rows of (feature_dim weights + 1 bias), flattened.
    let stride = feature_dim + 1;
    let objective = |params: &[f64]| -> (f64, Vec<f64>) {
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.len()];
        for (x, label) in &features {
            let logits: Vec<f64> = (0..classes)
                .map(|c| {
                    let row = &params[c * stride..(c + 1) * stride];
                    row[..feature_dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                        + row[feature_dim]
                })
                .collect();
            let probs = softmax(&logits);
            loss -= probs[*label].max(f64::MIN_POSITIVE).ln();
            for c in 0..classes {
                let delta = probs[c] - if c == *label { 1.0 } else { 0.0 };
                let g = &mut grad[c * stride..(c + 1) * stride];
                for (gw, v) in g[..feature_dim].iter_mut().zip(x) {
                    *gw += delta * v;
                }
                g[feature_dim] += delta;
            }
        }
        let n = features.len() as f64;
        loss /= n;
        for g in grad.iter_mut() {
            *g /= n;
        }
        // L2 on weights, not biases.
        for c in 0..classes {
            for j in 0..feature_dim {
                let idx = c * stride + j;
                grad[idx] += config.l2 * params[idx];
                loss += 0.5 * config.l2 * params[idx] * params[idx];
            }
        }
        (loss, grad)
    };
    let gd = GdConfig {
        max_iters: config.max_iters,
        tolerance: config.tolerance,
        ..GdConfig::default()
    };
    let out = gradient_descent(vec![0.0; classes * stride], &gd, objective);
    let output: Vec<Vec<f64>> = (0..classes)
        .map(|c| out.params[c * stride..c * stride + feature_dim].to_vec())
        .collect();
    let output_bias: Vec<f64> =
        (0..classes).map(|c| out.params[c * stride + feature_dim]).collect();
    Ok(RefClassifier { embedding_dim: dim, classes, hidden: hidden_layer, output, output_bias })
}

/// Per-strategy annotation budgets for one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundBudgets {
    pub random: usize,
    pub statistical: usize,
    pub lsb: usize,
    pub lsb_lt: usize,
}

impl Default for RoundBudgets {
    fn default() -> Self {
        // The statistical : LSB-LT mixture follows the reported 130 : 30
        // proportion.
        RoundBudgets { random: 0, statistical: 130, lsb: 0, lsb_lt: 30 }
    }
}

impl RoundBudgets {
    pub fn total(&self) -> usize {
        self.random + self.statistical + self.lsb + self.lsb_lt
    }
}

/// Full configuration for one selection round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub budgets: RoundBudgets,
    pub seed_rule: SeedRule,
    pub knn: KnnConfig,
    /// Lookalike keep threshold, in [0, 1].
    pub lookalike_threshold: f64,
    pub statistical_mix: MixRatio,
    pub lookalike_train: LookalikeTrainConfig,
    pub reference: RefClassifierConfig,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            budgets: RoundBudgets::default(),
            seed_rule: SeedRule::Quantile(0.15),
            knn: KnnConfig::default(),
            lookalike_threshold: 0.5,
            statistical_mix: MixRatio::default(),
            // Mismatches are rare once the reference model has fit the
            // labeled set; the balanced objective keeps lookalike scores
            // spread around the 0.5 operating point.
            lookalike_train: LookalikeTrainConfig {
                class_weighting: true,
                ..LookalikeTrainConfig::default()
            },
            reference: RefClassifierConfig::default(),
            seed: 0,
        }
    }
}

/// Everything recorded about one executed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub batches: Vec<SelectionBatch>,
    pub annotated: Vec<String>,
    pub report: EvalReport,
    pub train_accuracy: f64,
    pub warnings: Vec<String>,
}

/// Mutable loop state: the labeled snapshot, the candidate pool, withheld
/// oracle labels, a fixed held-out split, current models, and history.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub round: u32,
    pub labeled: SampleSet,
    pub pool: SampleSet,
    pub oracle: BTreeMap<String, usize>,
    pub heldout: SampleSet,
    pub reference: Option<RefClassifier>,
    pub lookalike: Option<LookalikeModel>,
    pub history: Vec<RoundRecord>,
}

impl PipelineState {
    pub fn new(
        labeled: SampleSet,
        pool: SampleSet,
        oracle: BTreeMap<String, usize>,
        heldout: SampleSet,
    ) -> Result<Self, PipelineError> {
        for record in pool.records() {
            if labeled.contains(&record.id) {
                return Err(PipelineError::Data(DataError::DuplicateId {
                    id: record.id.clone(),
                }));
            }
        }
        Ok(PipelineState {
            round: 0,
            labeled,
            pool,
            oracle,
            heldout,
            reference: None,
            lookalike: None,
            history: Vec::new(),
        })
    }

    pub fn from_corpus(corpus: crate::synth::SyntheticCorpus) -> Result<Self, PipelineError> {
        Self::new(corpus.labeled, corpus.pool, corpus.oracle, corpus.heldout)
    }
}

/// The selection plan for one round: trained models, per-strategy batches,
/// and warnings. Running a round executes a plan and then annotates.
pub struct RoundPlan {
    pub reference: RefClassifier,
    pub lookalike: Option<LookalikeModel>,
    pub labeled_rescored: SampleSet,
    pub pool_rescored: SampleSet,
    pub batches: Vec<SelectionBatch>,
    pub warnings: Vec<String>,
}

fn rescore(set: &SampleSet, model: &RefClassifier) -> Result<SampleSet, PipelineError> {
    let records = set
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.probs = model.predict_probs(&r.embedding);
            r
        })
        .collect();
    Ok(set.rebuild(records)?)
}

/// Binary held-out evaluation of the reference classifier: positive class is
/// label > 0, score is the predicted non-zero mass.
pub fn evaluate_reference(
    model: &RefClassifier,
    heldout: &SampleSet,
) -> Result<EvalReport, PipelineError> {
    let mut scores = Vec::with_capacity(heldout.len());
    let mut labels = Vec::with_capacity(heldout.len());
    let mut correct = 0usize;
    for record in heldout.records() {
        let label = record.label.ok_or_else(|| {
            PipelineError::Lookalike(LookalikeError::Unlabeled { id: record.id.clone() })
        })?;
        let probs = model.predict_probs(&record.embedding);
        scores.push(probs.iter().skip(1).sum());
        labels.push(label > 0);
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == label {
            correct += 1;
        }
    }
    let mut report =
        metrics::evaluate_binary(&scores, &labels, 0.5, &metrics::DEFAULT_PRECISION_TARGETS)?;
    report.accuracy = Some(correct as f64 / heldout.len().max(1) as f64);
    Ok(report)
}

/// Uniform random selection from the pool, excluding `taken` ids; the
/// shuffle is a pure function of the seed.
pub fn random_batch(
    pool: &SampleSet,
    budget: usize,
    seed: u64,
    taken: &std::collections::HashSet<String>,
) -> SelectionBatch {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<&str> = pool
        .records()
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !taken.contains(*id))
        .collect();
    candidates.shuffle(&mut rng);
    let entries = candidates
        .into_iter()
        .take(budget)
        .map(|id| SelectionEntry {
            id: id.to_string(),
            score: 0.0,
            seed_id: None,
            lookalike_score: None,
        })
        .collect();
    SelectionBatch::new(0, Strategy::Random, entries).expect("unique pool ids")
}

/// Build the selection plan for the next round without annotating anything.
pub fn plan_round(state: &PipelineState, config: &RoundConfig) -> Result<RoundPlan, PipelineError> {
    if !(0.0..=1.0).contains(&config.lookalike_threshold) {
        return Err(PipelineError::BadThreshold(config.lookalike_threshold));
    }
    let total = config.budgets.total();
    if total > state.pool.len() {
        return Err(PipelineError::BudgetExceedsPool { budget: total, pool: state.pool.len() });
    }
    let mut warnings = Vec::new();

    // Retrain the reference model on the current labeled set and rescore
    // both sides with it.
    let reference = train_reference_classifier(&state.labeled, &config.reference)?;
    let labeled = rescore(&state.labeled, &reference)?;
    let pool = rescore(&state.pool, &reference)?;

    let mut taken: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut batches: Vec<SelectionBatch> = Vec::new();

    // LSB-LT and LSB claim their (small, specific) candidate sets first;
    // the statistical mix then fills its quota from the rest of the pool.
    // An empty seed set degrades the round to statistical-only with a
    // warning.
    let mut lookalike = None;
    if config.budgets.lsb > 0 || config.budgets.lsb_lt > 0 {
        let seeds = select_seeds(&labeled, config.seed_rule)?;
        if seeds.is_empty() {
            warnings.push("empty seed set; statistical-only round".to_string());
        } else {
            let expansion = lsb_expand(&seeds, &labeled, &pool, &config.knn)?;
            if config.budgets.lsb_lt > 0 {
                let mismatch = build_mismatch_dataset(&labeled)?;
                match train_lookalike(&mismatch, &config.lookalike_train) {
                    Ok(model) => {
                        let filtered =
                            lt_filter(&model, &expansion, &pool, config.lookalike_threshold)?;
                        // Most-confident badcases first.
                        let mut entries: Vec<SelectionEntry> = filtered.entries;
                        entries.sort_by(|a, b| {
                            b.lookalike_score
                                .unwrap_or(0.0)
                                .total_cmp(&a.lookalike_score.unwrap_or(0.0))
                                .then_with(|| a.id.cmp(&b.id))
                        });
                        entries.truncate(config.budgets.lsb_lt);
                        if entries.len() < config.budgets.lsb_lt {
                            warnings.push(format!(
                                "lsb_lt budget {} not met: {} candidates passed the threshold",
                                config.budgets.lsb_lt,
                                entries.len()
                            ));
                        }
                        taken.extend(entries.iter().map(|e| e.id.clone()));
                        batches.push(
                            SelectionBatch::new(state.round, Strategy::LsbLt, entries)
                                .expect("unique"),
                        );
                        lookalike = Some(model);
                    }
                    // The labeled set can be all-match once the reference
                    // model fits it; degrade to the unfiltered strategies
                    // like the empty-seed case.
                    Err(LookalikeError::SingleClass) => {
                        warnings.push(
                            "lookalike untrainable (single mismatch class); lsb_lt skipped"
                                .to_string(),
                        );
                    }
                    Err(other) => return Err(other.into()),
                }
            }
            if config.budgets.lsb > 0 {
                // Closest-first work order, skipping already-taken ids.
                let entries: Vec<SelectionEntry> = expansion
                    .entries
                    .iter()
                    .filter(|e| !taken.contains(&e.id))
                    .take(config.budgets.lsb)
                    .cloned()
                    .collect();
                if entries.len() < config.budgets.lsb {
                    warnings.push(format!(
                        "lsb budget {} not met: {} candidates",
                        config.budgets.lsb,
                        entries.len()
                    ));
                }
                taken.extend(entries.iter().map(|e| e.id.clone()));
                batches.push(
                    SelectionBatch::new(state.round, Strategy::Lsb, entries).expect("unique"),
                );
            }
        }
    }

    if config.budgets.statistical > 0 {
        for mut batch in select_statistical_mix(
            &pool,
            config.budgets.statistical,
            config.statistical_mix,
            &taken,
        )? {
            batch.round = state.round;
            taken.extend(batch.ids().map(str::to_string));
            batches.push(batch);
        }
    }

    if config.budgets.random > 0 {
        let mut batch = random_batch(
            &pool,
            config.budgets.random,
            config.seed ^ (state.round as u64).wrapping_mul(0x9e3779b97f4a7c15),
            &taken,
        );
        batch.round = state.round;
        taken.extend(batch.ids().map(str::to_string));
        batches.push(batch);
    }

    Ok(RoundPlan {
        reference,
        lookalike,
        labeled_rescored: labeled,
        pool_rescored: pool,
        batches,
        warnings,
    })
}

/// Execute one round: plan, annotate the planned ids from the oracle, move
/// them into the labeled set, and append the round record.
pub fn run_round(state: &PipelineState, config: &RoundConfig) -> Result<PipelineState, PipelineError> {
    let plan = plan_round(state, config)?;
    let report = evaluate_reference(&plan.reference, &state.heldout)?;
    let train_accuracy = plan.reference.accuracy(&plan.labeled_rescored);

    let mut annotated: Vec<String> = Vec::new();
    for batch in &plan.batches {
        annotated.extend(batch.ids().map(str::to_string));
    }
    let mut labeled_records: Vec<_> = plan.labeled_rescored.records().to_vec();
    let mut pool_records: Vec<_> = plan.pool_rescored.records().to_vec();
    for id in &annotated {
        let label = *state
            .oracle
            .get(id)
            .ok_or_else(|| PipelineError::MissingOracle { id: id.clone() })?;
        let position = pool_records
            .iter()
            .position(|r| &r.id == id)
            .ok_or_else(|| PipelineError::MissingOracle { id: id.clone() })?;
        let mut record = pool_records.remove(position);
        record.label = Some(label);
        labeled_records.push(record);
    }
    let labeled = plan.labeled_rescored.rebuild(labeled_records)?;
    let pool = plan.pool_rescored.rebuild(pool_records)?;

    let record = RoundRecord {
        round: state.round,
        batches: plan.batches,
        annotated,
        report,
        train_accuracy,
        warnings: plan.warnings,
    };
    let mut history = state.history.clone();
    history.push(record);
    Ok(PipelineState {
        round: state.round + 1,
        labeled,
        pool,
        oracle: state.oracle.clone(),
        heldout: state.heldout.clone(),
        reference: Some(plan.reference),
        lookalike: plan.lookalike.or_else(|| state.lookalike.clone()),
        history,
    })
}

/// Run `rounds` rounds, optionally persisting every per-round artifact under
/// `out_dir`: selection batch files, the lookalike model, the held-out
/// report, and a run log echoing the config.
pub fn run_loop(
    mut state: PipelineState,
    config: &RoundConfig,
    rounds: u32,
    out_dir: Option<&Path>,
) -> Result<PipelineState, PipelineError> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        datastore::write_samples(&state.labeled, &dir.join("labeled.jsonl"), datastore::Format::Jsonl)?;
        datastore::write_samples(&state.pool, &dir.join("pool.jsonl"), datastore::Format::Jsonl)?;
        datastore::write_samples(&state.heldout, &dir.join("heldout.jsonl"), datastore::Format::Jsonl)?;
        std::fs::write(dir.join("oracle.json"), serde_json::to_string_pretty(&state.oracle)?)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    }
    for _ in 0..rounds {
        let executed_round = state.round;
        state = run_round(&state, config)?;
        if let Some(dir) = out_dir {
            let record = state.history.last().expect("round just ran");
            for batch in &record.batches {
                let name = format!("round{:03}_{}.jsonl", executed_round, batch.strategy);
                datastore::write_selection(batch, &dir.join(name))?;
            }
            if let Some(model) = &state.lookalike {
                model
                    .save(&dir.join(format!("round{executed_round:03}_lookalike.json")))
                    .map_err(PipelineError::Lookalike)?;
            }
            std::fs::write(
                dir.join(format!("round{executed_round:03}_eval.json")),
                record.report.to_json(),
            )?;
        }
    }
    if let Some(dir) = out_dir {
        let summary: Vec<_> = state
            .history
            .iter()
            .map(|r| {
                serde_json::json!({
                    "round": r.round,
                    "annotated": r.annotated.len(),
                    "auc": r.report.auc,
                    "accuracy": r.report.accuracy,
                    "warnings": r.warnings,
                })
            })
            .collect();
        std::fs::write(dir.join("runlog.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(state)
}
