//! Evaluation metrics: AUROC, AUPRC (average precision), macro-averaged
//! classification reports, and flat MSE/MAE.
//!
//! AUROC is computed from average ranks (Mann-Whitney), which equals the
//! pairwise definition P(score_pos > score_neg) + 0.5 P(tie) exactly. AUPRC
//! is step-wise average precision with ties broken by stable input order.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric needs a non-empty input")]
    Empty,
    #[error("AUROC/AUPRC need both classes present")]
    SingleClass,
    #[error("class index {class} out of range (n_classes={n_classes})")]
    ClassOutOfRange { class: usize, n_classes: usize },
}

/// Real-valued scores paired with binary labels (1 = positive).
#[derive(Debug, Clone)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(MetricError::Empty);
        }
        Ok(Self { scores, labels })
    }

    fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Area under the ROC curve: the probability a random positive outscores a
/// random negative, with ties counting one half.
pub fn auroc(scored: &ScoredLabels) -> Result<f64, MetricError> {
    let n_pos = scored.n_positive();
    let n_neg = scored.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    // Average ranks (1-based); tied scores share the mean of their ranks.
    let mut order: Vec<usize> = (0..scored.scores.len()).collect();
    order.sort_by(|&a, &b| scored.scores[a].total_cmp(&scored.scores[b]));
    let mut ranks = vec![0.0; order.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored.scores[order[j + 1]] == scored.scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // mean of ranks i+1 ..= j+1
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = scored
        .labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Average precision: the mean, over positives ranked by descending score,
/// of the precision at each positive's rank. Equal scores keep their input
/// order (stable sort).
pub fn auprc(scored: &ScoredLabels) -> Result<f64, MetricError> {
    let n_pos = scored.n_positive();
    if n_pos == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scored.scores.len()).collect();
    order.sort_by(|&a, &b| scored.scores[b].total_cmp(&scored.scores[a]));
    let mut seen_pos = 0usize;
    let mut sum_precision = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if scored.labels[idx] == 1 {
            seen_pos += 1;
            sum_precision += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum_precision / n_pos as f64)
}

/// Accuracy plus macro-averaged precision/recall/F1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro-averaged multiclass report. A class absent from both predictions
/// and labels contributes zero to every macro average (the denominator stays
/// the full class count).
pub fn classification_report(
    predicted: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<ClassificationReport, MetricError> {
    if predicted.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: predicted.len(),
            labels: labels.len(),
        });
    }
    if predicted.is_empty() {
        return Err(MetricError::Empty);
    }
    for &c in predicted.iter().chain(labels) {
        if c >= n_classes {
            return Err(MetricError::ClassOutOfRange { class: c, n_classes });
        }
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    let mut correct = 0usize;
    for (&p, &y) in predicted.iter().zip(labels) {
        if p == y {
            correct += 1;
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut prec_sum = 0.0;
    let mut rec_sum = 0.0;
    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let p = ratio(tp[c], tp[c] + fp[c]);
        let r = ratio(tp[c], tp[c] + fn_[c]);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        prec_sum += p;
        rec_sum += r;
        f1_sum += f1;
    }
    let k = n_classes as f64;
    Ok(ClassificationReport {
        accuracy: correct as f64 / predicted.len() as f64,
        precision: prec_sum / k,
        recall: rec_sum / k,
        f1: f1_sum / k,
    })
}

/// Flat mean squared and mean absolute error over all queries. (The
/// per-variable double average is the training loss, not this metric.)
pub fn mse_mae(predictions: &[f64], targets: &[f64]) -> Result<(f64, f64), MetricError> {
    if predictions.len() != targets.len() {
        return Err(MetricError::LengthMismatch {
            scores: predictions.len(),
            labels: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    let n = predictions.len() as f64;
    Ok((se / n, ae / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scored(scores: &[f64], labels: &[u8]) -> ScoredLabels {
        ScoredLabels::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    /// O(n^2) pairwise definition used as the independent oracle.
    fn auroc_bruteforce(s: &ScoredLabels) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in s.labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in s.labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1.0;
                if s.scores[i] > s.scores[j] {
                    wins += 1.0;
                } else if s.scores[i] == s.scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_perfect_and_inverted() {
        assert_eq!(auroc(&scored(&[0.9, 0.1], &[1, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&scored(&[0.1, 0.9], &[1, 0])).unwrap(), 0.0);
    }

    #[test]
    fn auroc_tie_example() {
        let s = scored(&[0.8, 0.8, 0.6, 0.4], &[1, 0, 1, 0]);
        assert!((auroc(&s).unwrap() - 0.625).abs() < 1e-12);
    }

    #[test]
    fn auroc_single_class_errors() {
        assert!(matches!(
            auroc(&scored(&[0.5, 0.6], &[1, 1])),
            Err(MetricError::SingleClass)
        ));
    }

    #[test]
    fn auroc_matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.gen_range(2..=200);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            // Quantize scores so ties actually occur.
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let s = ScoredLabels::new(scores, labels).unwrap();
            let fast = auroc(&s).unwrap();
            let brute = auroc_bruteforce(&s);
            assert!((fast - brute).abs() < 1e-9, "{fast} vs {brute}");
        }
    }

    #[test]
    fn auroc_negation_complements_without_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let n = rng.gen_range(2..=60);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = auroc(&ScoredLabels::new(scores, labels.clone()).unwrap()).unwrap();
            let b = auroc(&ScoredLabels::new(neg, labels).unwrap()).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&scored(&[0.9, 0.1], &[1, 0])).unwrap(), 1.0);
        // Positive ranked second: precision at its rank is 1/2.
        assert_eq!(auprc(&scored(&[0.9, 0.1], &[0, 1])).unwrap(), 0.5);
        assert_eq!(auprc(&scored(&[0.3, 0.2], &[1, 1])).unwrap(), 1.0);
    }

    #[test]
    fn auprc_rank_enumeration_oracle() {
        // scores desc: idx2 (0.9,neg), idx0 (0.7,pos), idx1 (0.5,pos), idx3 (0.1,neg)
        // precisions at positives: 1/2, 2/3 -> AP = (0.5 + 2/3) / 2
        let s = scored(&[0.7, 0.5, 0.9, 0.1], &[1, 1, 0, 0]);
        let expect = (0.5 + 2.0 / 3.0) / 2.0;
        assert!((auprc(&s).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_under_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 60;
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let base_roc = auroc(&ScoredLabels::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let mut idx: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let ps: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let pl: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let perm_roc = auroc(&ScoredLabels::new(ps, pl).unwrap()).unwrap();
        assert!((base_roc - perm_roc).abs() < 1e-12);
    }

    #[test]
    fn report_perfect_predictions() {
        let r = classification_report(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn report_matches_confusion_matrix_hand_computation() {
        // labels [1, 0], predictions [1, 1]:
        // class 1: TP=1 FP=1 FN=0 -> P=0.5 R=1 F1=2/3
        // class 0: TP=0 FP=0 FN=1 -> P=0 R=0 F1=0
        let r = classification_report(&[1, 1], &[1, 0], 2).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert!((r.precision - 0.25).abs() < 1e-12);
        assert!((r.recall - 0.5).abs() < 1e-12);
        assert!((r.f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_accuracy_is_majority_fraction() {
        let labels = vec![0, 0, 0, 1, 1, 0, 0];
        let preds = vec![0; labels.len()];
        let r = classification_report(&preds, &labels, 2).unwrap();
        assert!((r.accuracy - 5.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn mse_mae_examples() {
        assert_eq!(mse_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        let (mse, mae) = mse_mae(&[1.0, 3.0], &[0.0, 0.0]).unwrap();
        assert_eq!(mse, 5.0);
        assert_eq!(mae, 2.0);
    }

    #[test]
    fn mae_bounded_by_root_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=40);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (mse, mae) = mse_mae(&p, &t).unwrap();
            assert!(mae <= mse.sqrt() + 1e-12);
        }
    }
}
