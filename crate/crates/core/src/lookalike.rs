//! The binary mismatch classifier over latent embeddings and the
//! lookalike-threshold filter.
//!
//! A record is a mismatch (`d = 1`) when the argmax of its probability
//! vector disagrees with its human label. A logistic regression over the
//! embedding predicts that mismatch; keeping LSB candidates whose predicted
//! mismatch probability clears a threshold concentrates the batch on likely
//! badcases.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{SampleSet, SelectionBatch, SelectionEntry, Strategy};
use crate::metrics::{self, MetricError};
use crate::opt::{gradient_descent, GdConfig};

#[derive(Debug, Error)]
pub enum LookalikeError {
    #[error("record {id:?} has no label")]
    Unlabeled { id: String },
    #[error("training data contains a single class")]
    SingleClass,
    #[error("non-finite feature value in example {index}")]
    NonFiniteFeature { index: usize },
    #[error("embedding length {got} does not match model dim {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("batch id {id:?} not resolvable to an embedding")]
    UnresolvableId { id: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// One training example for the mismatch classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchExample {
    pub embedding: Vec<f64>,
    pub mismatch: bool,
}

/// Initialization of the trainer. Zero is the documented default; the
/// seeded-random variant exists to exercise convexity (any start converges
/// to the same loss).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zero,
    Random { scale: f64 },
}

/// Lookalike training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LookalikeTrainConfig {
    /// L2 strength on the weight vector (bias unregularized).
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once an iteration improves the loss by less than this.
    pub tolerance: f64,
    pub seed: u64,
    /// Weight classes by inverse frequency instead of the plain likelihood.
    pub class_weighting: bool,
    /// Keep only this fraction of match (d = 0) examples, sampled with the
    /// config seed.
    pub negative_keep: Option<f64>,
    pub init: Init,
}

impl Default for LookalikeTrainConfig {
    fn default() -> Self {
        LookalikeTrainConfig {
            l2: 1e-4,
            max_iters: 2000,
            tolerance: 1e-8,
            seed: 0,
            class_weighting: false,
            negative_keep: None,
            init: Init::Zero,
        }
    }
}

/// Training metadata kept with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub iterations: usize,
    pub final_loss: f64,
    pub l2: f64,
    pub positives: usize,
    pub negatives: usize,
    pub loss_trace: Vec<f64>,
}

/// Trained mismatch classifier: weight vector, bias, and metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookalikeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub meta: TrainMeta,
}

impl LookalikeModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LookalikeError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), LookalikeError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, LookalikeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One example per labeled record: mismatch iff argmax(probs) != label,
/// argmax ties broken by the smallest class index.
pub fn build_mismatch_dataset(set: &SampleSet) -> Result<Vec<MismatchExample>, LookalikeError> {
    set.records()
        .iter()
        .map(|record| {
            let label =
                record.label.ok_or_else(|| LookalikeError::Unlabeled { id: record.id.clone() })?;
            let mut argmax = 0usize;
            for (i, &p) in record.probs.iter().enumerate() {
                if p > record.probs[argmax] {
                    argmax = i;
                }
            }
            Ok(MismatchExample { embedding: record.embedding.clone(), mismatch: argmax != label })
        })
        .collect()
}

/// Numerically stable sigmoid.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable softplus, log(1 + e^z).
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Train the mismatch classifier by full-batch gradient descent with
/// backtracking step halving. The objective is the (optionally
/// class-weighted) mean binary cross-entropy plus `l2/2 * ||U||^2`; the run
/// is deterministic given the config.
pub fn train_lookalike(
    examples: &[MismatchExample],
    config: &LookalikeTrainConfig,
) -> Result<LookalikeModel, LookalikeError> {
    for (i, ex) in examples.iter().enumerate() {
        if ex.embedding.iter().any(|v| !v.is_finite()) {
            return Err(LookalikeError::NonFiniteFeature { index: i });
        }
    }
    let mut kept: Vec<&MismatchExample> = match config.negative_keep {
        Some(ratio) => {
            let mut negatives: Vec<&MismatchExample> =
                examples.iter().filter(|e| !e.mismatch).collect();
            let keep = ((negatives.len() as f64) * ratio).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            negatives.shuffle(&mut rng);
            negatives.truncate(keep);
            examples.iter().filter(|e| e.mismatch).chain(negatives).collect()
        }
        None => examples.iter().collect(),
    };
    // Input order does not carry meaning; subsampling above may have
    // reordered negatives, so restore a deterministic layout.
    kept.sort_by_key(|e| e.mismatch);

    let positives = kept.iter().filter(|e| e.mismatch).count();
    let negatives = kept.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(LookalikeError::SingleClass);
    }
    let dim = kept[0].embedding.len();

    let (w_pos, w_neg) = if config.class_weighting {
        let n = kept.len() as f64;
        (n / (2.0 * positives as f64), n / (2.0 * negatives as f64))
    } else {
        (1.0, 1.0)
    };
    let weight_sum = w_pos * positives as f64 + w_neg * negatives as f64;

    // params layout: [U..., b]
    let objective = |params: &[f64]| -> (f64, Vec<f64>) {
        let (weights, bias) = params.split_at(dim);
        let mut loss = 0.0;
        let mut grad = vec![0.0; dim + 1];
        for ex in &kept {
            let z: f64 =
                weights.iter().zip(&ex.embedding).map(|(u, h)| u * h).sum::<f64>() + bias[0];
            let d = if ex.mismatch { 1.0 } else { 0.0 };
            let w = if ex.mismatch { w_pos } else { w_neg };
            loss += w * (softplus(z) - d * z);
            let residual = w * (sigmoid(z) - d);
            for (g, h) in grad[..dim].iter_mut().zip(&ex.embedding) {
                *g += residual * h;
            }
            grad[dim] += residual;
        }
        loss /= weight_sum;
        for g in grad.iter_mut() {
            *g /= weight_sum;
        }
        for (g, u) in grad[..dim].iter_mut().zip(weights) {
            *g += config.l2 * u;
        }
        loss += 0.5 * config.l2 * weights.iter().map(|u| u * u).sum::<f64>();
        (loss, grad)
    };

    let initial = match config.init {
        Init::Zero => vec![0.0; dim + 1],
        Init::Random { scale } => {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            (0..dim + 1).map(|_| rng.random_range(-scale..scale)).collect()
        }
    };
    let gd = GdConfig {
        max_iters: config.max_iters,
        tolerance: config.tolerance,
        ..GdConfig::default()
    };
    let out = gradient_descent(initial, &gd, objective);
    let (weights, bias) = out.params.split_at(dim);
    Ok(LookalikeModel {
        weights: weights.to_vec(),
        bias: bias[0],
        meta: TrainMeta {
            iterations: out.iterations,
            final_loss: *out.trace.last().expect("trace never empty"),
            l2: config.l2,
            positives,
            negatives,
            loss_trace: out.trace,
        },
    })
}

/// Predicted mismatch probability for one embedding.
pub fn lookalike_score(model: &LookalikeModel, embedding: &[f64]) -> Result<f64, LookalikeError> {
    if embedding.len() != model.weights.len() {
        return Err(LookalikeError::DimMismatch {
            got: embedding.len(),
            want: model.weights.len(),
        });
    }
    let z: f64 =
        model.weights.iter().zip(embedding).map(|(u, h)| u * h).sum::<f64>() + model.bias;
    Ok(sigmoid(z))
}

/// Keep batch entries whose lookalike score is at least `threshold`,
/// annotating each kept entry with its score. The kept rule reads as
/// "likely mismatch stays in", matching the reported per-task thresholds;
/// input order is preserved and the result is tagged `lsb_lt`.
pub fn lt_filter(
    model: &LookalikeModel,
    batch: &SelectionBatch,
    source: &SampleSet,
    threshold: f64,
) -> Result<SelectionBatch, LookalikeError> {
    let mut entries = Vec::new();
    for entry in &batch.entries {
        let embedding = source
            .embedding_of(&entry.id)
            .map_err(|_| LookalikeError::UnresolvableId { id: entry.id.clone() })?;
        let score = lookalike_score(model, embedding)?;
        if score >= threshold {
            entries.push(SelectionEntry { lookalike_score: Some(score), ..entry.clone() });
        }
    }
    Ok(SelectionBatch::new(batch.round, Strategy::LsbLt, entries)
        .expect("subset of unique ids stays unique"))
}

/// Held-out AUC of the mismatch classifier.
pub fn evaluate_lookalike(
    model: &LookalikeModel,
    examples: &[MismatchExample],
) -> Result<f64, LookalikeError> {
    let mut scores = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        scores.push(lookalike_score(model, &ex.embedding)?);
        labels.push(ex.mismatch);
    }
    Ok(metrics::roc_auc(&scores, &labels)?)
}
