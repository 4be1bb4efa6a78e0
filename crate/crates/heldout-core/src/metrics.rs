//! Exact precision/recall, PR curves, average precision, and multi-trial
//! aggregation.
//!
//! The positive class is always the anomaly. Thresholding is `score ≥ t`,
//! the curve has one point per distinct score value in descending order
//! (tied scores share a threshold), and average precision is the
//! recall-increment weighted sum of precisions over those points with
//! recall₀ = 0. AUROC is deliberately absent: it is insensitive to skew,
//! which is the quantity this benchmark is built around.

use crate::score::ScoredExample;
use crate::{Error, Result};
use alloc::vec::Vec;

/// Exact counts at one threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl ConfusionCounts {
    /// tp / (tp + fp), defined as 1 when nothing is predicted positive
    /// (no false positives exist, and the paired recall increment is 0).
    pub fn precision(&self) -> f64 {
        let denom = self.true_pos + self.false_pos;
        if denom == 0 {
            1.0
        } else {
            self.true_pos as f64 / denom as f64
        }
    }

    /// tp / (tp + fn).
    pub fn recall(&self) -> f64 {
        let denom = self.true_pos + self.false_neg;
        if denom == 0 {
            0.0
        } else {
            self.true_pos as f64 / denom as f64
        }
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// One point of the precision-recall curve, at threshold `threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Average precision plus the context needed to interpret it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApResult {
    pub average_precision: f64,
    /// Fraction of anomalous examples; the expected AP of a random scorer.
    pub skew: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Mean ± sample standard deviation over trials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialAggregate {
    pub mean: f64,
    pub std: f64,
    pub n_trials: usize,
}

fn check_finite(scored: &[ScoredExample]) -> Result<()> {
    for (i, s) in scored.iter().enumerate() {
        if !s.score.is_finite() {
            return Err(Error::NonFiniteScore { index: i });
        }
    }
    Ok(())
}

/// Counts with positive prediction ⇔ score ≥ t.
pub fn confusion_at(scored: &[ScoredExample], t: f64) -> Result<ConfusionCounts> {
    check_finite(scored)?;
    let mut c = ConfusionCounts {
        true_pos: 0,
        false_pos: 0,
        false_neg: 0,
        true_neg: 0,
    };
    for s in scored {
        match (s.score >= t, s.is_anomaly) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// The full curve: one point per distinct score, descending. Requires at
/// least one positive example (recall is undefined otherwise).
pub fn pr_curve(scored: &[ScoredExample]) -> Result<Vec<PrPoint>> {
    check_finite(scored)?;
    let n_pos = scored.iter().filter(|s| s.is_anomaly).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_unstable_by(|&a, &b| scored[b].score.total_cmp(&scored[a].score));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scored[order[i]].score;
        // Consume the whole tie group before emitting a point.
        while i < order.len() && scored[order[i]].score == t {
            if scored[order[i]].is_anomaly {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: t,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / n_pos as f64,
        });
    }
    Ok(points)
}

/// Recall-increment weighted mean of precisions over [`pr_curve`] points.
pub fn average_precision(scored: &[ScoredExample]) -> Result<ApResult> {
    let points = pr_curve(scored)?;
    let n_pos = scored.iter().filter(|s| s.is_anomaly).count();
    let n_neg = scored.len() - n_pos;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for p in &points {
        ap += p.precision * (p.recall - prev_recall);
        prev_recall = p.recall;
    }
    Ok(ApResult {
        average_precision: ap,
        skew: n_pos as f64 / scored.len() as f64,
        n_pos,
        n_neg,
    })
}

/// Arithmetic mean and sample std (n−1 denominator; 0 when n = 1).
pub fn aggregate_trials(values: &[f64]) -> Result<TrialAggregate> {
    if values.is_empty() {
        return Err(Error::Protocol("aggregate of zero trials".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        libm::sqrt(ss / (n - 1) as f64)
    };
    Ok(TrialAggregate {
        mean,
        std,
        n_trials: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scored(pairs: &[(f64, bool)]) -> Vec<ScoredExample> {
        pairs
            .iter()
            .map(|&(score, is_anomaly)| ScoredExample { score, is_anomaly })
            .collect()
    }

    #[test]
    fn confusion_simple_split() {
        let s = scored(&[(0.2, false), (0.8, true)]);
        let c = confusion_at(&s, 0.5).unwrap();
        assert_eq!(
            c,
            ConfusionCounts { true_pos: 1, false_pos: 0, false_neg: 0, true_neg: 1 }
        );
        assert_eq!(c.total(), 2);
    }

    #[test]
    fn confusion_at_extremes() {
        let s = scored(&[(0.1, true), (0.5, false), (0.9, true), (0.2, false)]);
        let all = confusion_at(&s, f64::NEG_INFINITY).unwrap();
        assert_eq!(all.recall(), 1.0);
        assert_eq!(all.precision(), 0.5); // precision at t = −∞ is the skew
        let none = confusion_at(&s, 1.0).unwrap();
        assert_eq!(none.true_pos + none.false_pos, 0);
        assert_eq!(none.precision(), 1.0, "empty prediction convention");
        assert_eq!(none.recall(), 0.0);
    }

    #[test]
    fn pr_curve_enumerated_example() {
        let s = scored(&[(0.9, true), (0.8, false), (0.7, true), (0.6, false)]);
        let pts = pr_curve(&s).unwrap();
        let got: Vec<(f64, f64)> = pts.iter().map(|p| (p.recall, p.precision)).collect();
        let want = vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0), (1.0, 0.5)];
        assert_eq!(got.len(), want.len());
        for ((gr, gp), (wr, wp)) in got.iter().zip(&want) {
            assert!((gr - wr).abs() < 1e-15 && (gp - wp).abs() < 1e-15);
        }
        let ap = average_precision(&s).unwrap();
        assert!((ap.average_precision - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!((ap.n_pos, ap.n_neg), (2, 2));
    }

    #[test]
    fn perfect_separation_gives_ap_one() {
        let s = scored(&[(0.9, true), (0.8, true), (0.2, false), (0.1, false)]);
        let pts = pr_curve(&s).unwrap();
        assert!(pts
            .iter()
            .any(|p| (p.recall - 1.0).abs() < 1e-15 && (p.precision - 1.0).abs() < 1e-15));
        let ap = average_precision(&s).unwrap();
        assert_eq!(ap.average_precision, 1.0);
    }

    #[test]
    fn tied_scores_collapse_to_one_point() {
        let s = scored(&[(0.5, true), (0.5, false), (0.5, false), (0.5, true)]);
        let pts = pr_curve(&s).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].recall, 1.0);
        assert_eq!(pts[0].precision, 0.5);
        let ap = average_precision(&s).unwrap();
        assert_eq!(ap.average_precision, ap.skew);
    }

    #[test]
    fn terminal_point_always_reaches_full_recall() {
        let s = scored(&[(0.3, false), (0.9, true), (0.1, true), (0.5, false)]);
        let pts = pr_curve(&s).unwrap();
        assert_eq!(pts.last().unwrap().recall, 1.0);
        // Recall is non-decreasing as the threshold drops.
        for w in pts.windows(2) {
            assert!(w[1].recall >= w[0].recall);
        }
    }

    #[test]
    fn zero_positives_is_an_error() {
        let s = scored(&[(0.3, false), (0.5, false)]);
        assert!(matches!(pr_curve(&s), Err(Error::NoPositives)));
        assert!(matches!(average_precision(&s), Err(Error::NoPositives)));
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let s = scored(&[(f64::NAN, true), (0.5, false)]);
        assert!(matches!(
            average_precision(&s),
            Err(Error::NonFiniteScore { index: 0 })
        ));
        let s2 = scored(&[(0.1, true), (f64::INFINITY, false)]);
        assert!(matches!(
            confusion_at(&s2, 0.0),
            Err(Error::NonFiniteScore { index: 1 })
        ));
    }

    #[test]
    fn aggregate_mean_and_sample_std() {
        let a = aggregate_trials(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((a.mean, a.std, a.n_trials), (1.0, 0.0, 3));
        let b = aggregate_trials(&[0.0, 2.0]).unwrap();
        assert!((b.mean - 1.0).abs() < 1e-15);
        assert!((b.std - libm::sqrt(2.0)).abs() < 1e-15);
        let c = aggregate_trials(&[0.7]).unwrap();
        assert_eq!((c.mean, c.std), (0.7, 0.0));
        assert!(aggregate_trials(&[]).is_err());
    }
}
