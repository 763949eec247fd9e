//! Classification metrics and the silhouette score.

use num::{BigInt, BigRational, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn headline(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.auroc,
            self.auprc,
        ]
    }
}

/// `confusion[y][p]` counts samples of true class `y` predicted as `p`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        m[y][p] += 1;
    }
    m
}

fn ratio(num: usize, den: usize) -> BigRational {
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("bounded ratio")
}

/// `(precision, recall, f1)` per class as exact ratios; empty denominators give 0.
fn per_class_prf(cm: &[Vec<usize>]) -> Vec<(BigRational, BigRational, BigRational)> {
    let c = cm.len();
    (0..c)
        .map(|k| {
            let tp = cm[k][k];
            let predicted: usize = (0..c).map(|y| cm[y][k]).sum();
            let actual: usize = cm[k].iter().sum();
            (
                ratio(tp, predicted),
                ratio(tp, actual),
                ratio(2 * tp, predicted + actual),
            )
        })
        .collect()
}

/// Macro F1 as an exact ratio.
pub fn macro_f1_exact(preds: &[usize], labels: &[usize], num_classes: usize) -> BigRational {
    let cm = confusion_matrix(preds, labels, num_classes);
    let sum = per_class_prf(&cm)
        .into_iter()
        .fold(BigRational::zero(), |acc, (_, _, f)| acc + f);
    sum / BigInt::from(num_classes)
}

/// One-vs-rest ROC area via the Mann-Whitney statistic on mid-ranks, so tied
/// scores count one half. A class without positives or negatives scores 0.5.
pub fn auroc(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let p = positive.iter().filter(|&&b| b).count();
    if p == 0 || p == n {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (p as f64, (n - p) as f64);
    (rank_sum - p * (p + 1.0) / 2.0) / (p * q)
}

/// Step-wise average precision, tied scores entering together. A class
/// without positives scores 0.
pub fn auprc(scores: &[f64], positive: &[bool]) -> f64 {
    let total = positive.iter().filter(|&&b| b).count();
    if total == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += positive[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    ap
}

/// Full report from hard predictions and per-class scores `scores[i][c]`.
pub fn compute_metrics(
    preds: &[usize],
    labels: &[usize],
    scores: &[Vec<f64>],
    num_classes: usize,
) -> Result<MetricReport> {
    if labels.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    if preds.len() != labels.len() || scores.len() != labels.len() {
        return Err(Error::contract(
            "predictions, scores and labels differ in length",
        ));
    }
    if preds.iter().chain(labels).any(|&c| c >= num_classes)
        || scores.iter().any(|s| s.len() != num_classes)
    {
        return Err(Error::contract(format!(
            "class index outside 0..{num_classes}"
        )));
    }
    let cm = confusion_matrix(preds, labels, num_classes);
    let prf = per_class_prf(&cm);
    let mut per_class = Vec::with_capacity(num_classes);
    for (k, (p, r, f)) in prf.iter().enumerate() {
        let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        let col: Vec<f64> = scores.iter().map(|s| s[k]).collect();
        per_class.push(ClassMetrics {
            precision: to_f64(p),
            recall: to_f64(r),
            f1: to_f64(f),
            auroc: auroc(&col, &pos),
            auprc: auprc(&col, &pos),
            support: pos.iter().filter(|&&b| b).count(),
        });
    }
    let c = BigInt::from(num_classes);
    let mean_exact = |pick: fn(&(BigRational, BigRational, BigRational)) -> &BigRational| {
        to_f64(&(prf.iter().map(pick).fold(BigRational::zero(), |a, x| a + x) / c.clone()))
    };
    let mean =
        |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / num_classes as f64;
    let correct: usize = (0..num_classes).map(|k| cm[k][k]).sum();
    Ok(MetricReport {
        accuracy: correct as f64 / labels.len() as f64,
        precision: mean_exact(|t| &t.0),
        recall: mean_exact(|t| &t.1),
        f1: mean_exact(|t| &t.2),
        auroc: mean(|m| m.auroc),
        auprc: mean(|m| m.auprc),
        per_class,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette with Euclidean distance. Members of singleton clusters
/// score 0, as does `0/0`; fewer than two clusters gives 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::contract("points and labels differ in length"));
    }
    let n = points.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += euclid(&points[i], &points[j]);
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;
    use crate::oracle;
    use crate::seeding;

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 1];
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| (0..3).map(|c| if c == y { 0.9 } else { 0.05 }).collect())
            .collect();
        let r = compute_metrics(&labels, &labels, &scores, 3).unwrap();
        assert_eq!(r.headline(), [1.0; 6]);
    }

    #[test]
    fn hand_confusion_example() {
        let r = compute_metrics(
            &[1, 1, 0],
            &[1, 0, 0],
            &[vec![0.4, 0.6], vec![0.3, 0.7], vec![0.8, 0.2]],
            2,
        )
        .unwrap();
        assert_eq!(r.f1, 2.0 / 3.0);
        assert!(r.per_class.iter().all(|c| (c.f1 - 2.0 / 3.0).abs() < 1e-15));
        assert_eq!(
            macro_f1_exact(&[1, 1, 0], &[1, 0, 0], 2),
            BigRational::new(2.into(), 3.into())
        );
    }

    #[test]
    fn uniform_scores_give_half() {
        assert_eq!(
            auroc(&[0.3; 6], &[true, false, true, false, false, true]),
            0.5
        );
        let r = compute_metrics(&[0, 0, 0, 0], &[0, 1, 0, 1], &vec![vec![0.5, 0.5]; 4], 2).unwrap();
        assert!(r.per_class.iter().all(|c| c.auroc == 0.5));
    }

    #[test]
    fn missing_positives_and_empty_split() {
        assert_eq!(auroc(&[0.1, 0.2], &[false, false]), 0.5);
        assert_eq!(auprc(&[0.1, 0.2], &[false, false]), 0.0);
        assert!(matches!(
            compute_metrics(&[], &[], &[], 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn silhouette_examples() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 0.0],
            vec![10.0, 1.0],
        ];
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        assert!((s - 0.90025).abs() < 1e-4, "{s}");
        assert_eq!(
            silhouette(&vec![vec![1.0, 1.0]; 4], &[0, 0, 1, 1]).unwrap(),
            0.0
        );
        assert_eq!(silhouette(&pts, &[0, 0, 0, 0]).unwrap(), 0.0);
        let tight = vec![vec![0.0], vec![0.01], vec![100.0], vec![100.01]];
        assert!(silhouette(&tight, &[0, 0, 1, 1]).unwrap() > 0.9);
        // Singleton cluster member contributes 0.
        let s = silhouette(&[vec![0.0], vec![1.0], vec![50.0]], &[0, 0, 1]).unwrap();
        assert!((s - (49.0 / 50.0 + 48.0 / 49.0) / 3.0).abs() < 1e-12, "{s}");
    }

    fn instance(seed: u64) -> (Vec<usize>, Vec<usize>, Vec<Vec<f64>>, usize) {
        let mut r = seeding::stream(seed, "metrics", &[]);
        let n = r.random_range(1..=50);
        let c = r.random_range(2..=4);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        // Coarse grid so ties are common.
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| r.random_range(0..8) as f64 / 8.0).collect())
            .collect();
        let preds = (0..n).map(|_| r.random_range(0..c)).collect();
        (preds, labels, scores, c)
    }

    #[test]
    fn agrees_with_brute_force_on_random_instances() {
        for seed in 0..50 {
            let (preds, labels, scores, c) = instance(seed);
            let r = compute_metrics(&preds, &labels, &scores, c).unwrap();
            let exact = oracle::macro_f1_rational(&preds, &labels, c);
            assert_eq!(r.f1, oracle::rational_to_f64(&exact));
            assert_eq!(macro_f1_exact(&preds, &labels, c), exact);
            for (k, m) in r.per_class.iter().enumerate() {
                let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
                let col: Vec<f64> = scores.iter().map(|s| s[k]).collect();
                assert!((m.auroc - oracle::auroc_threshold_sweep(&col, &pos)).abs() < 1e-9);
                assert!((m.auprc - oracle::auprc_threshold_sweep(&col, &pos)).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_macro_is_mean(seed in any::<u64>()) {
            let (preds, labels, scores, c) = instance(seed);
            let r = compute_metrics(&preds, &labels, &scores, c).unwrap();
            for v in r.headline() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let mean = |f: fn(&ClassMetrics) -> f64| r.per_class.iter().map(f).sum::<f64>() / c as f64;
            prop_assert!((r.f1 - mean(|m| m.f1)).abs() < 1e-12);
            prop_assert!((r.precision - mean(|m| m.precision)).abs() < 1e-12);
            prop_assert!((r.recall - mean(|m| m.recall)).abs() < 1e-12);
        }

        #[test]
        fn silhouette_matches_brute_force(seed in any::<u64>()) {
            let mut r = seeding::stream(seed, "sil", &[]);
            let n = r.random_range(2..20);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]).collect();
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
            let s = silhouette(&pts, &labels).unwrap();
            prop_assert!((s - oracle::silhouette_brute_force(&pts, &labels)).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
