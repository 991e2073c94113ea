//! Accuracy, macro F1, one-vs-rest macro AUC-ROC and mean/std aggregation.
//!
//! Conventions: precision or recall with a zero denominator is 0; a class
//! with neither true nor predicted instances still counts in the macro F1
//! average (with F1 = 0); AUC ties count one half.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `None` when no class is eligible for a one-vs-rest AUC.
    pub auc_ovr_macro: Option<f64>,
    pub support: Vec<usize>,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsBundle {
    pub fn compute(truth: &[usize], pred: &[usize], proba: &[Vec<f64>], n_classes: usize) -> Result<Self> {
        let accuracy = accuracy(truth, pred)?;
        let macro_f1 = macro_f1(truth, pred, n_classes)?;
        let auc_ovr_macro = match auc_ovr_macro(truth, proba, n_classes) {
            Ok(v) => Some(v),
            Err(Error::NoEligibleClass) => None,
            Err(e) => return Err(e),
        };
        let mut support = vec![0; n_classes];
        let mut confusion = vec![vec![0; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            support[t] += 1;
            confusion[t][p] += 1;
        }
        Ok(MetricsBundle {
            accuracy,
            macro_f1,
            auc_ovr_macro,
            support,
            confusion,
        })
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth.len(), pred.len())?;
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    Ok(correct as f64 / truth.len() as f64)
}

pub fn per_class_f1(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    check_lengths(truth.len(), pred.len())?;
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        actual[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    Ok((0..n_classes)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], actual[c]);
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn macro_f1(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<f64> {
    let f1 = per_class_f1(truth, pred, n_classes)?;
    Ok(f1.iter().sum::<f64>() / n_classes as f64)
}

/// Binary AUC of `scores` against `positive` using average ranks
/// (Mann-Whitney U). Returns `None` unless both groups are non-empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives keeps everything integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, doubled.
        let twice_avg_rank = (i + 1 + j + 1) as u64;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        twice_rank_sum += twice_avg_rank * pos_in_tie;
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Some(twice_u as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

pub fn auc_ovr_macro(truth: &[usize], proba: &[Vec<f64>], n_classes: usize) -> Result<f64> {
    check_lengths(truth.len(), proba.len())?;
    let mut total = 0.0;
    let mut eligible = 0usize;
    let mut scores = Vec::with_capacity(truth.len());
    let mut positive = Vec::with_capacity(truth.len());
    for c in 0..n_classes {
        scores.clear();
        positive.clear();
        for (row, &t) in proba.iter().zip(truth) {
            scores.push(row[c]);
            positive.push(t == c);
        }
        if let Some(auc) = binary_auc(&scores, &positive) {
            total += auc;
            eligible += 1;
        }
    }
    if eligible == 0 {
        return Err(Error::NoEligibleClass);
    }
    Ok(total / eligible as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population (N-divisor) standard deviation.
    pub std: f64,
}

pub fn aggregate_stats(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(MeanStd { mean, std: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const N: usize = 0;
    const U: usize = 1;
    const P: usize = 2;

    #[test]
    fn accuracy_fixtures() {
        assert_eq!(accuracy(&[P, N, U], &[P, N, U]).unwrap(), 1.0);
        assert!((accuracy(&[P, P, N], &[P, N, N]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(accuracy(&[P], &[P, N]), Err(Error::LengthMismatch(1, 2))));
        assert!(matches!(accuracy(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn accuracy_matches_counting_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<usize> = (0..1000).map(|_| rng.random_range(0..3)).collect();
        let pred: Vec<usize> = (0..1000).map(|_| rng.random_range(0..3)).collect();
        let mut correct = 0;
        for i in 0..1000 {
            if truth[i] == pred[i] {
                correct += 1;
            }
        }
        assert_eq!(accuracy(&truth, &pred).unwrap(), correct as f64 / 1000.0);
    }

    #[test]
    fn macro_f1_fixtures() {
        assert_eq!(macro_f1(&[P, N, U, P], &[P, N, U, P], 3).unwrap(), 1.0);
        // F1(p) = 0.5, F1(n) = 0.5, F1(u) = 0.
        let v = macro_f1(&[P, P, N, N], &[P, N, P, N], 3).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        let single = macro_f1(&[P, P, P], &[P, P, P], 3).unwrap();
        assert!((single - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_fixtures() {
        let truth = [N, U, P, P];
        let perfect = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.2, 0.1, 0.7],
        ];
        assert_eq!(auc_ovr_macro(&truth, &perfect, 3).unwrap(), 1.0);
        let flat = vec![vec![1.0 / 3.0; 3]; 4];
        assert_eq!(auc_ovr_macro(&truth, &flat, 3).unwrap(), 0.5);
        let single = vec![vec![0.0, 0.0, 1.0]; 2];
        assert!(matches!(
            auc_ovr_macro(&[P, P], &single, 3),
            Err(Error::NoEligibleClass)
        ));
    }

    #[test]
    fn aggregate_fixtures() {
        assert_eq!(aggregate_stats(&[5.0]).unwrap(), MeanStd { mean: 5.0, std: 0.0 });
        assert_eq!(aggregate_stats(&[0.0, 10.0]).unwrap(), MeanStd { mean: 5.0, std: 5.0 });
        assert!(aggregate_stats(&[]).is_err());
    }

    #[test]
    fn aggregate_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..100).map(|_| rng.random::<f64>() * 10.0).collect();
        let mut sum = 0.0;
        for x in &v {
            sum += x;
        }
        let mean = sum / 100.0;
        let mut ss = 0.0;
        for x in &v {
            ss += (x - mean) * (x - mean);
        }
        let s = aggregate_stats(&v).unwrap();
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.std - (ss / 100.0).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn accuracy_permutation_invariant(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60), seed in any::<u64>()) {
            let truth: Vec<_> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<_> = pairs.iter().map(|p| p.1).collect();
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let t2: Vec<_> = idx.iter().map(|&i| truth[i]).collect();
            let p2: Vec<_> = idx.iter().map(|&i| pred[i]).collect();
            prop_assert_eq!(accuracy(&truth, &pred).unwrap(), accuracy(&t2, &p2).unwrap());
        }

        #[test]
        fn auc_invariant_under_monotone_transform(raw in prop::collection::vec(0u32..50, 4..40), labels in prop::collection::vec(any::<bool>(), 4..40)) {
            let scores: Vec<f64> = raw.iter().map(|&v| v as f64 / 50.0).collect();
            let n = scores.len().min(labels.len());
            let s = &scores[..n];
            let l = &labels[..n];
            let transformed: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() + 1.0).collect();
            prop_assert_eq!(binary_auc(s, l), binary_auc(&transformed, l));
        }
    }
}
