//! Threshold-free detection metrics. Outliers are the positive class and a
//! higher score means "more likely an outlier". Every metric is in `[0, 100]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    inliers: Vec<f64>,
    outliers: Vec<f64>,
}

impl LabeledScores {
    pub fn new(inliers: Vec<f64>, outliers: Vec<f64>) -> Result<Self> {
        if inliers.is_empty() || outliers.is_empty() {
            return Err(Error::Contract(
                "metrics need at least one inlier and one outlier".into(),
            ));
        }
        if inliers.iter().chain(&outliers).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("detection score".into()));
        }
        Ok(LabeledScores { inliers, outliers })
    }

    pub fn inliers(&self) -> &[f64] {
        &self.inliers
    }

    pub fn outliers(&self) -> &[f64] {
        &self.outliers
    }

    /// The same sets with roles exchanged.
    pub fn swapped(&self) -> Self {
        LabeledScores {
            inliers: self.outliers.clone(),
            outliers: self.inliers.clone(),
        }
    }

    /// `(true positives, false positives)` after each distinct threshold,
    /// scanning from the highest score down. Equal scores form one step.
    fn sweep(&self) -> Vec<(usize, usize)> {
        let mut all: Vec<(f64, bool)> = self
            .outliers
            .iter()
            .map(|&s| (s, true))
            .chain(self.inliers.iter().map(|&s| (s, false)))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut steps = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (i, &(score, positive)) in all.iter().enumerate() {
            if positive {
                tp += 1;
            } else {
                fp += 1;
            }
            if !matches!(all.get(i + 1), Some(next) if next.0 == score) {
                steps.push((tp, fp));
            }
        }
        steps
    }
}

/// Probability that a random outlier outscores a random inlier, ties
/// counting one half (Mann-Whitney).
pub fn auroc(s: &LabeledScores) -> f64 {
    let mut inl = s.inliers.clone();
    inl.sort_by(f64::total_cmp);
    let mut credit = 0.0;
    for &o in &s.outliers {
        let below = inl.partition_point(|&v| v < o);
        let not_above = inl.partition_point(|&v| v <= o);
        credit += below as f64 + 0.5 * (not_above - below) as f64;
    }
    let pairs = s.outliers.len() as f64 * s.inliers.len() as f64;
    // Both orientations round the smaller share, so the two directions sum to exactly 100.
    if 2.0 * credit <= pairs {
        100.0 * credit / pairs
    } else {
        100.0 - 100.0 * (pairs - credit) / pairs
    }
}

/// Average precision: precision at each threshold weighted by the recall
/// gained there.
pub fn auprc(s: &LabeledScores) -> f64 {
    let positives = s.outliers.len() as f64;
    let mut prev_tp = 0;
    let mut weighted = 0.0;
    for (tp, fp) in s.sweep() {
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            weighted += (tp - prev_tp) as f64 * precision;
            prev_tp = tp;
        }
    }
    // Dividing once keeps a perfect ranking at exactly 100.
    100.0 * weighted / positives
}

/// Smallest false-positive rate among thresholds whose true-positive rate
/// reaches `tpr_target`.
pub fn fpr_at_tpr(s: &LabeledScores, tpr_target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tpr_target) {
        return Err(Error::Contract(format!(
            "TPR target must lie in [0, 1], got {tpr_target}"
        )));
    }
    let positives = s.outliers.len() as f64;
    let negatives = s.inliers.len() as f64;
    let best = s
        .sweep()
        .into_iter()
        .filter(|&(tp, _)| tp as f64 >= tpr_target * positives - 1e-9)
        .map(|(_, fp)| fp)
        .min()
        .expect("the lowest threshold reaches TPR 1");
    Ok(100.0 * best as f64 / negatives)
}

/// FPR at 80 % TPR.
pub fn fpr80(s: &LabeledScores) -> f64 {
    fpr_at_tpr(s, 0.8).expect("0.8 is a valid target")
}

/// All three metrics for one labeled set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub fpr80: f64,
}

impl DetectionMetrics {
    pub fn of(s: &LabeledScores) -> Self {
        DetectionMetrics {
            auroc: auroc(s),
            auprc: auprc(s),
            fpr80: fpr80(s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(inl: &[f64], out: &[f64]) -> LabeledScores {
        LabeledScores::new(inl.to_vec(), out.to_vec()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&ls(&[0.0, 1.0], &[2.0, 3.0])), 100.0);
        assert_eq!(auroc(&ls(&[1.0, 0.0], &[1.0, 0.0])), 50.0);
        assert_eq!(auroc(&ls(&[0.6, 0.1], &[0.9, 0.4])), 75.0);
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&ls(&[0.0, 1.0], &[2.0, 3.0])), 100.0);
        for k in 1..8 {
            let inl: Vec<f64> = (0..k).map(|i| 10.0 + i as f64).collect();
            let want = 100.0 / (k + 1) as f64;
            assert!((auprc(&ls(&inl, &[0.0])) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr80(&ls(&[0.0, 1.0], &[2.0, 3.0])), 0.0);
        assert_eq!(fpr80(&ls(&[1.0, 1.0], &[1.0, 1.0])), 100.0);
        assert_eq!(fpr80(&ls(&[2.5, 0.5], &[3.0, 2.0, 1.0])), 50.0);
        assert!(fpr_at_tpr(&ls(&[0.0], &[1.0]), 1.5).is_err());
    }

    #[test]
    fn rejects_empty_or_non_finite_sets() {
        assert!(LabeledScores::new(vec![], vec![1.0]).is_err());
        assert!(LabeledScores::new(vec![1.0], vec![]).is_err());
        assert!(LabeledScores::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn monotone_transform_invariance() {
        let s = ls(&[0.1, 0.5, 0.5, 0.9], &[0.3, 0.5, 1.2]);
        let t = ls(
            &s.inliers()
                .iter()
                .map(|v| (3.0 * v).exp())
                .collect::<Vec<_>>(),
            &s.outliers()
                .iter()
                .map(|v| (3.0 * v).exp())
                .collect::<Vec<_>>(),
        );
        assert_eq!(DetectionMetrics::of(&s), DetectionMetrics::of(&t));
        assert_eq!(auroc(&s) + auroc(&s.swapped()), 100.0);
    }
}
