//! Slow reference implementations used to cross-check the library, shared by
//! the test suites and the `selfcheck` subcommand.

use num::{BigInt, BigRational, ToPrimitive, Zero};

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (unit(a), unit(b));
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

/// NT-Xent evaluated term by term over all pairs.
pub fn nt_xent_brute_force(h: &[Vec<f64>], h_aug: &[Vec<f64>], tau: f64, symmetric: bool) -> f64 {
    let b = h.len();
    let all: Vec<&Vec<f64>> = h.iter().chain(h_aug).collect();
    let anchors = if symmetric { 2 * b } else { b };
    let mut total = 0.0;
    for i in 0..anchors {
        let pos = if i < b { i + b } else { i - b };
        let num = (cosine(all[i], all[pos]) / tau).exp();
        let mut den = 0.0;
        for (k, other) in all.iter().enumerate() {
            if k != i {
                den += (cosine(all[i], other) / tau).exp();
            }
        }
        total -= (num / den).ln();
    }
    total / anchors as f64
}

/// Macro F1 in exact rational arithmetic. A class with an empty
/// denominator contributes 0.
pub fn macro_f1_rational(preds: &[usize], labels: &[usize], num_classes: usize) -> BigRational {
    let mut total = BigRational::zero();
    for c in 0..num_classes {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &y)| p == c && y == c)
            .count();
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &y)| p == c && y != c)
            .count();
        let fn_ = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &y)| p != c && y == c)
            .count();
        let den = 2 * tp + fp + fn_;
        if den > 0 {
            total += BigRational::new(BigInt::from(2 * tp), BigInt::from(den));
        }
    }
    total / BigInt::from(num_classes)
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

fn distinct_desc(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// ROC area by sweeping every distinct threshold and integrating the
/// piecewise-linear curve with the trapezoid rule.
pub fn auroc_threshold_sweep(scores: &[f64], positive: &[bool]) -> f64 {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let n = positive.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return 0.5;
    }
    let mut pts = vec![(0.0, 0.0)];
    for t in distinct_desc(scores) {
        let tp = scores
            .iter()
            .zip(positive)
            .filter(|&(&s, &y)| s >= t && y)
            .count() as f64;
        let fp = scores
            .iter()
            .zip(positive)
            .filter(|&(&s, &y)| s >= t && !y)
            .count() as f64;
        pts.push((fp / n, tp / p));
    }
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Average precision `Σ (R_k − R_{k−1})·P_k` over distinct thresholds.
pub fn auprc_threshold_sweep(scores: &[f64], positive: &[bool]) -> f64 {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    if p == 0.0 {
        return 0.0;
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in distinct_desc(scores) {
        let tp = scores
            .iter()
            .zip(positive)
            .filter(|&(&s, &y)| s >= t && y)
            .count() as f64;
        let k = scores.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / p;
        ap += (recall - prev_recall) * (tp / k);
        prev_recall = recall;
    }
    ap
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette, evaluated point by point.
pub fn silhouette_brute_force(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 || points.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, x) in points.iter().enumerate() {
        let mean_to = |c: usize| -> Option<f64> {
            let d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i && labels[j] == c)
                .map(|(_, y)| dist(x, y))
                .collect();
            (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
        };
        let Some(a) = mean_to(labels[i]) else {
            continue;
        };
        let b = classes
            .iter()
            .filter(|&&c| c != labels[i])
            .filter_map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / points.len() as f64
}

/// First Adam step on a scalar from zero state: `−lr·ĝ/(|ĝ|+ε)` with
/// bias-corrected moments that reduce to `g` and `g²`.
pub fn adam_first_step(w: f64, g: f64, lr: f64, eps: f64) -> f64 {
    w - lr * g / (g.abs() + eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_agree_with_hand_values() {
        let f1 = macro_f1_rational(&[1, 1, 0], &[1, 0, 0], 2);
        assert_eq!(f1, BigRational::new(2.into(), 3.into()));
        assert_eq!(
            auroc_threshold_sweep(&[0.5; 4], &[true, false, true, false]),
            0.5
        );
        assert_eq!(auroc_threshold_sweep(&[0.9, 0.1], &[true, false]), 1.0);
        assert_eq!(
            auprc_threshold_sweep(&[0.9, 0.8, 0.1], &[true, false, true]),
            0.5 + 0.5 * 2.0 / 3.0
        );
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 0.0],
            vec![10.0, 1.0],
        ];
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        assert!((silhouette_brute_force(&pts, &[0, 0, 1, 1]) - (b - 1.0) / b).abs() < 1e-12);
        assert!((adam_first_step(0.0, 1.0, 0.1, 1e-8) + 0.1).abs() < 1e-8);
        let same = vec![vec![1.0, 2.0]; 2];
        assert!((nt_xent_brute_force(&same, &same, 0.5, false) - 3f64.ln()).abs() < 1e-12);
    }
}
