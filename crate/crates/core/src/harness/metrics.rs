//! Classification and anomaly-detection metrics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Per-class and macro-averaged scores over `classes` classes. A class that
/// is never predicted has precision 0; one that never occurs has recall 0.
pub fn scores(truth: &[usize], pred: &[usize], classes: usize) -> Scores {
    assert_eq!(truth.len(), pred.len(), "truth and prediction lengths differ");
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            if t < classes {
                tp[t] += 1;
            }
        } else {
            if p < classes {
                fp[p] += 1;
            }
            if t < classes {
                fneg[t] += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fneg[c]);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics {
                class: c,
                support: tp[c] + fneg[c],
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let avg = |f: fn(&ClassMetrics) -> f64| {
        if classes == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / classes as f64
        }
    };
    Scores {
        macro_precision: avg(|m| m.precision),
        macro_recall: avg(|m| m.recall),
        macro_f1: avg(|m| m.f1),
        accuracy: ratio(tp.iter().sum(), truth.len()),
        per_class,
    }
}

/// Fraction of positions where the two decision sequences agree.
pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "decision lengths differ");
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Area under the ROC curve for `labels` (nonzero = positive) ranked by
/// `scores`, via the Mann-Whitney statistic with tied ranks averaged.
/// Returns `None` unless both classes are present.
pub fn auroc(labels: &[usize], scores: &[f64]) -> Option<f64> {
    assert_eq!(labels.len(), scores.len(), "label and score lengths differ");
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(l, _)| **l != 0).map(|(_, r)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Value below which `q` of the sorted values fall (nearest rank).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = ((q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[pos - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_scores() {
        // class 0: tp 2, fp 1, fn 1 -> p 2/3, r 2/3
        // class 1: tp 1, fp 1, fn 1 -> p 1/2, r 1/2
        let truth = [0, 0, 0, 1, 1];
        let pred = [0, 0, 1, 1, 0];
        let s = scores(&truth, &pred, 2);
        assert!((s.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.per_class[1].f1 - 0.5).abs() < 1e-12);
        assert!((s.macro_f1 - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-12);
        assert!((s.accuracy - 0.6).abs() < 1e-12);
    }

    #[test]
    fn unpredicted_class_scores_zero() {
        let s = scores(&[0, 1, 2], &[0, 1, 1], 3);
        assert_eq!(s.per_class[2].f1, 0.0);
        assert_eq!(s.per_class[2].precision, 0.0);
    }

    #[test]
    fn auroc_by_pair_counting() {
        let labels = [0, 0, 1, 1, 0, 1];
        let scores = [0.1, 0.4, 0.35, 0.8, 0.5, 0.5];
        // Count positive-negative pairs ranked correctly, ties count half.
        let mut good = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        good += 1.0;
                    } else if scores[i] == scores[j] {
                        good += 0.5;
                    }
                }
            }
        }
        assert!((auroc(&labels, &scores).unwrap() - good / pairs).abs() < 1e-12);
        assert_eq!(auroc(&[1, 1], &[0.0, 1.0]), None);
    }

    #[test]
    fn quantile_nearest_rank() {
        assert_eq!(quantile(&[5.0, 1.0, 3.0, 2.0, 4.0], 0.8), 4.0);
        assert_eq!(quantile(&[5.0, 1.0], 1.0), 5.0);
    }

    proptest! {
        #[test]
        fn auroc_is_a_probability(v in proptest::collection::vec((0usize..2, -5.0f64..5.0), 2..60)) {
            let (l, s): (Vec<usize>, Vec<f64>) = v.into_iter().unzip();
            if let Some(a) = auroc(&l, &s) {
                prop_assert!((0.0..=1.0).contains(&a));
                let flipped: Vec<f64> = s.iter().map(|x| -x).collect();
                prop_assert!((auroc(&l, &flipped).unwrap() - (1.0 - a)).abs() < 1e-9);
            }
        }

        #[test]
        fn perfect_prediction_scores_one(t in proptest::collection::vec(0usize..4, 1..50)) {
            let s = scores(&t, &t, 4);
            prop_assert_eq!(s.accuracy, 1.0);
            for m in &s.per_class {
                prop_assert!(m.support == 0 || m.f1 == 1.0);
            }
        }
    }
}
