//! Binary classification metrics: ROC AUC, F1, recall at precision targets,
//! and Beta-posterior variance over operating points.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("scores and labels have different lengths: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input")]
    Empty,
    #[error("both classes must be present")]
    SingleClass,
    #[error("score at index {0} is NaN")]
    NanScore(usize),
    #[error("precision target {0} outside (0, 1]")]
    TargetOutOfRange(f64),
    #[error("empty precision-recall curve")]
    EmptyCurve,
}

fn check_scored(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricError::NanScore(i));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass);
    }
    Ok((positives, negatives))
}

/// ROC AUC by the rank method with midranks for ties; equals the
/// Mann-Whitney statistic (wins + half ties) / (P * N).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (positives, negatives) = check_scored(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank for the tied block [i, j].
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fnc: usize,
    tnc: usize,
}

fn counts_at(scores: &[f64], labels: &[bool], threshold: f64) -> Counts {
    let mut c = Counts { tp: 0, fp: 0, fnc: 0, tnc: 0 };
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (predicted, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fnc += 1,
            (false, false) => c.tnc += 1,
        }
    }
    c
}

fn f1_from_counts(c: &Counts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fnc;
    if denom == 0 {
        // No predicted and no actual positives at this threshold.
        0.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

/// F1 at a decision threshold (score >= threshold predicts positive).
/// Degenerate cases (no predicted or no actual positives) are 0.
pub fn f1_binary(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64, MetricError> {
    check_scored(scores, labels)?;
    Ok(f1_from_counts(&counts_at(scores, labels, threshold)))
}

/// Best F1 over the distinct-score threshold sweep, with the threshold that
/// attains it (ties prefer the larger threshold).
pub fn best_f1(scores: &[f64], labels: &[bool]) -> Result<(f64, f64), MetricError> {
    check_scored(scores, labels)?;
    let mut best = (0.0, f64::INFINITY);
    for threshold in sweep_thresholds(scores) {
        let f1 = f1_from_counts(&counts_at(scores, labels, threshold));
        if f1 > best.0 {
            best = (f1, threshold);
        }
    }
    Ok(best)
}

/// Distinct observed scores plus +inf, descending. At +inf nothing is
/// predicted positive.
fn sweep_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_unstable_by(|a, b| b.total_cmp(a));
    t.dedup();
    let mut out = vec![f64::INFINITY];
    out.extend(t);
    out
}

/// One operating point chosen for a precision target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecallPoint {
    pub target: f64,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fnc: usize,
    pub tnc: usize,
    pub beta_variance: f64,
    /// False when no threshold attains the target precision; such points
    /// report zero recall at the empty operating point.
    pub attainable: bool,
}

/// For each target precision, the maximum recall over swept thresholds whose
/// precision meets the target. Ties prefer higher precision, then the larger
/// threshold. Unattainable targets yield a flagged zero-recall point.
pub fn recall_at_precision(
    scores: &[f64],
    labels: &[bool],
    targets: &[f64],
) -> Result<Vec<PrecisionRecallPoint>, MetricError> {
    let (positives, _) = check_scored(scores, labels)?;
    for &t in targets {
        if !(t > 0.0 && t <= 1.0) {
            return Err(MetricError::TargetOutOfRange(t));
        }
    }
    // Precision/recall at every distinct-score threshold, reusable across
    // targets.
    let operating: Vec<(f64, Counts, f64, f64)> = sweep_thresholds(scores)
        .into_iter()
        .map(|threshold| {
            let c = counts_at(scores, labels, threshold);
            let precision =
                if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
            let recall = c.tp as f64 / positives as f64;
            (threshold, c, precision, recall)
        })
        .collect();
    let points = targets
        .iter()
        .map(|&target| {
            let mut best: Option<&(f64, Counts, f64, f64)> = None;
            for point in &operating {
                let (_, c, precision, recall) = point;
                if c.tp + c.fp == 0 || *precision < target {
                    continue;
                }
                best = match best {
                    None => Some(point),
                    Some(cur) => {
                        let better = recall
                            .partial_cmp(&cur.3)
                            .unwrap()
                            .then(precision.partial_cmp(&cur.2).unwrap())
                            .then(point.0.total_cmp(&cur.0));
                        if better == std::cmp::Ordering::Greater {
                            Some(point)
                        } else {
                            Some(cur)
                        }
                    }
                };
            }
            match best {
                Some(&(threshold, c, precision, recall)) => PrecisionRecallPoint {
                    target,
                    threshold,
                    precision,
                    recall,
                    tp: c.tp,
                    fp: c.fp,
                    fnc: c.fnc,
                    tnc: c.tnc,
                    beta_variance: beta_variance(c.tp, c.fp),
                    attainable: true,
                },
                None => {
                    let c = counts_at(scores, labels, f64::INFINITY);
                    PrecisionRecallPoint {
                        target,
                        threshold: f64::INFINITY,
                        precision: 0.0,
                        recall: 0.0,
                        tp: c.tp,
                        fp: c.fp,
                        fnc: c.fnc,
                        tnc: c.tnc,
                        beta_variance: beta_variance(c.tp, c.fp),
                        attainable: false,
                    }
                }
            }
        })
        .collect();
    Ok(points)
}

/// Variance of the Beta(tp + 1, fp + 1) posterior over an operating point's
/// positive proportion.
pub fn beta_variance(tp: usize, fp: usize) -> f64 {
    let alpha = tp as f64 + 1.0;
    let beta = fp as f64 + 1.0;
    alpha * beta / ((alpha + beta).powi(2) * (alpha + beta + 1.0))
}

/// Threshold below which the maximum Beta variance counts as statistically
/// certain.
pub const CERTAINTY_THRESHOLD: f64 = 0.005;

/// Maximum per-point Beta variance over a curve.
pub fn max_beta_variance(curve: &[PrecisionRecallPoint]) -> Result<f64, MetricError> {
    curve
        .iter()
        .map(|p| p.beta_variance)
        .max_by(|a, b| a.total_cmp(b))
        .ok_or(MetricError::EmptyCurve)
}

/// Full binary evaluation: AUC, F1 at a threshold, the recall-at-precision
/// curve, and the Beta-variance summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub f1: f64,
    pub f1_threshold: f64,
    pub best_f1: f64,
    pub curve: Vec<PrecisionRecallPoint>,
    pub max_beta_variance: f64,
    pub certain: bool,
    /// Fraction of argmax-correct predictions when the caller tracks one;
    /// binary reports built from scores alone leave it unset.
    pub accuracy: Option<f64>,
}

/// Default precision targets, mirroring the R@P40 through R@P90 readout.
pub const DEFAULT_PRECISION_TARGETS: [f64; 6] = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Build an `EvalReport` from scores and binary labels.
pub fn evaluate_binary(
    scores: &[f64],
    labels: &[bool],
    f1_threshold: f64,
    targets: &[f64],
) -> Result<EvalReport, MetricError> {
    let auc = roc_auc(scores, labels)?;
    let f1 = f1_binary(scores, labels, f1_threshold)?;
    let (best, _) = best_f1(scores, labels)?;
    let curve = recall_at_precision(scores, labels, targets)?;
    let max_var = max_beta_variance(&curve)?;
    Ok(EvalReport {
        auc,
        f1,
        f1_threshold,
        best_f1: best,
        curve,
        max_beta_variance: max_var,
        certain: max_var < CERTAINTY_THRESHOLD,
        accuracy: None,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table with one R@P column per curve point.
    pub fn render_table(&self) -> String {
        let mut header = format!("{:>8} {:>8}", "AUC", "F1");
        let mut row = format!("{:>8.4} {:>8.4}", self.auc, self.f1);
        for point in &self.curve {
            header.push_str(&format!(" {:>8}", format!("R@P{:.0}", point.target * 100.0)));
            if point.attainable {
                row.push_str(&format!(" {:>8.4}", point.recall));
            } else {
                row.push_str(&format!(" {:>8}", "-"));
            }
        }
        header.push_str(&format!(" {:>12}", "maxBetaVar"));
        row.push_str(&format!(" {:>12.3e}", self.max_beta_variance));
        format!("{header}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(P*N) pairwise oracle: wins + half ties over all positive-negative
    /// pairs.
    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_extremes_and_ties() {
        let labels = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
    }

    #[test]
    fn auc_rank_method_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Quantized scores so ties actually occur.
        let scores: Vec<f64> = (0..500).map(|_| rng.random_range(0..50) as f64 / 50.0).collect();
        let labels: Vec<bool> = (0..500).map(|_| rng.random_range(0.0..1.0) < 0.3).collect();
        let fast = roc_auc(&scores, &labels).unwrap();
        let slow = pairwise_auc(&scores, &labels);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn auc_errors() {
        assert!(matches!(roc_auc(&[], &[]), Err(MetricError::Empty)));
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(MetricError::SingleClass)
        ));
        assert!(matches!(
            roc_auc(&[f64::NAN, 0.2], &[true, false]),
            Err(MetricError::NanScore(0))
        ));
    }

    #[test]
    fn f1_hand_cases() {
        // Perfect classifier.
        let labels = [true, true, false];
        assert_eq!(f1_binary(&[0.9, 0.8, 0.1], &labels, 0.5).unwrap(), 1.0);
        // No predicted positives.
        assert_eq!(f1_binary(&[0.1, 0.2, 0.05], &labels, 0.5).unwrap(), 0.0);
        // TP=2, FP=1, FN=1 -> 2*2 / (4 + 1 + 1).
        let scores = [0.9, 0.8, 0.7, 0.1];
        let labels = [true, true, false, true];
        let f1 = f1_binary(&scores, &labels, 0.5).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn beta_variance_hand_values() {
        assert!((beta_variance(0, 0) - 1.0 / 12.0).abs() < 1e-12);
        assert!((beta_variance(1, 0) - 2.0 / 36.0).abs() < 1e-12);
        let v = beta_variance(99, 1);
        assert!((v - 200.0 / (102.0f64.powi(2) * 103.0)).abs() < 1e-15);
        assert!((v - 1.866e-4).abs() < 1e-6);
    }

    #[test]
    fn max_beta_variance_and_certainty() {
        let point = |tp: usize, fp: usize| PrecisionRecallPoint {
            target: 0.5,
            threshold: 0.5,
            precision: 1.0,
            recall: 1.0,
            tp,
            fp,
            fnc: 0,
            tnc: 0,
            beta_variance: beta_variance(tp, fp),
            attainable: true,
        };
        let single = [point(0, 0)];
        let max = max_beta_variance(&single).unwrap();
        assert!((max - 1.0 / 12.0).abs() < 1e-12);
        assert!(max >= CERTAINTY_THRESHOLD);

        let curve = [point(99, 1), point(999, 1)];
        let max = max_beta_variance(&curve).unwrap();
        assert!((max - beta_variance(99, 1)).abs() < 1e-15);
        assert!(max < CERTAINTY_THRESHOLD);

        assert!(matches!(max_beta_variance(&[]), Err(MetricError::EmptyCurve)));
    }

    #[test]
    fn scaling_counts_at_fixed_ratio_never_raises_variance() {
        for &(tp, fp) in &[(3usize, 1usize), (30, 10), (300, 100), (3000, 1000)] {
            assert!(beta_variance(10 * tp, 10 * fp) <= beta_variance(tp, fp));
        }
    }

    #[test]
    fn recall_at_precision_perfect_and_unattainable() {
        let labels = [true, true, false, false];
        let perfect = recall_at_precision(&[0.9, 0.8, 0.2, 0.1], &labels, &[0.4, 0.9, 1.0]).unwrap();
        for point in &perfect {
            assert!(point.attainable);
            assert_eq!(point.recall, 1.0);
        }

        // Constant scorer: precision is pinned at the base rate (0.5 here),
        // so higher targets are unattainable and flagged.
        let constant = recall_at_precision(&[0.5; 4], &labels, &[0.4, 0.75]).unwrap();
        assert!(constant[0].attainable);
        assert_eq!(constant[0].recall, 1.0);
        assert!(!constant[1].attainable);
        assert_eq!(constant[1].recall, 0.0);
        assert_eq!(constant[1].tp, 0);

        assert!(matches!(
            recall_at_precision(&[0.5; 4], &labels, &[0.0]),
            Err(MetricError::TargetOutOfRange(_))
        ));
    }

    /// Exhaustive sweep oracle for recall at a precision target.
    fn sweep_oracle(scores: &[f64], labels: &[bool], target: f64) -> (f64, bool) {
        let positives = labels.iter().filter(|&&l| l).count();
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.push(f64::INFINITY);
        let mut best: Option<f64> = None;
        for &t in &thresholds {
            let c = counts_at(scores, labels, t);
            if c.tp + c.fp == 0 {
                continue;
            }
            let precision = c.tp as f64 / (c.tp + c.fp) as f64;
            if precision >= target {
                let recall = c.tp as f64 / positives as f64;
                best = Some(best.map_or(recall, |b: f64| b.max(recall)));
            }
        }
        (best.unwrap_or(0.0), best.is_some())
    }

    #[test]
    fn recall_at_precision_matches_sweep_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let scores: Vec<f64> = (0..300).map(|_| rng.random_range(0..40) as f64 / 40.0).collect();
        let labels: Vec<bool> =
            scores.iter().map(|&s| rng.random_range(0.0..1.0) < 0.3 + 0.4 * s).collect();
        let targets = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        let points = recall_at_precision(&scores, &labels, &targets).unwrap();
        for point in &points {
            let (recall, attainable) = sweep_oracle(&scores, &labels, point.target);
            assert_eq!(point.recall, recall, "target {}", point.target);
            assert_eq!(point.attainable, attainable);
        }
        // Non-increasing in the target.
        for pair in points.windows(2) {
            assert!(pair[1].recall <= pair[0].recall);
        }
    }

    #[test]
    fn report_builds_and_renders() {
        let scores = [0.9, 0.7, 0.6, 0.4, 0.2, 0.1];
        let labels = [true, true, false, true, false, false];
        let report =
            evaluate_binary(&scores, &labels, 0.5, &DEFAULT_PRECISION_TARGETS).unwrap();
        assert!(report.auc > 0.5);
        assert_eq!(report.curve.len(), 6);
        let table = report.render_table();
        assert!(table.contains("R@P40"));
        assert!(table.contains("R@P90"));
        let parsed: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(parsed, report);
    }
}
