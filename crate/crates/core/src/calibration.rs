//! ROC analysis on the calibration set and threshold selection.
//!
//! Scores are linear predictors: the ROC curve only depends on the ordering of
//! scores, so it is identical on the probability scale.

use std::cmp::Ordering;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledSet;
use crate::model::BinaryModel;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration needs at least one positive and one negative, got {positives}/{negatives}")]
    DegenerateCalibration { positives: usize, negatives: usize },
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fp_rate: f64,
    pub tp_rate: f64,
    /// Rates count scores `≥ cut`; the leading anchor has `cut = +∞`.
    pub cut: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
    auc: f64,
    positives: usize,
    negatives: usize,
}

impl RocCurve {
    /// Points by descending cut, from (0, 0) to (1, 1).
    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }

    pub fn auc(&self) -> f64 {
        self.auc
    }

    /// Area between the curve and the chance diagonal.
    pub fn area_above_diagonal(&self) -> f64 {
        self.auc - 0.5
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    /// `cut,fp_rate,tp_rate` rows for plotting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "cut,fp_rate,tp_rate")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.cut, p.fp_rate, p.tp_rate)?;
        }
        Ok(())
    }
}

/// Builds the curve from `(score, is_positive)` pairs. Tied scores collapse to
/// a single point and the area is the trapezoid sum.
pub fn roc_from_scores(scored: &[(f64, bool)]) -> Result<RocCurve, CalibrationError> {
    if let Some(&(s, _)) = scored.iter().find(|(s, _)| !s.is_finite()) {
        return Err(CalibrationError::NonFiniteScore(s));
    }
    let positives = scored.iter().filter(|(_, y)| *y).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CalibrationError::DegenerateCalibration { positives, negatives });
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (np, nn) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint { fp_rate: 0.0, tp_rate: 0.0, cut: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let cut = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == cut {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fp_rate: fp as f64 / nn, tp_rate: tp as f64 / np, cut });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fp_rate - w[0].fp_rate) * (w[0].tp_rate + w[1].tp_rate) / 2.0)
        .sum::<f64>()
        .clamp(0.0, 1.0);
    Ok(RocCurve { points, auc, positives, negatives })
}

/// Linear predictors of `model` over a calibration set, paired with labels.
pub fn scores(model: &BinaryModel, calib: &LabeledSet) -> Vec<(f64, bool)> {
    calib
        .rows()
        .iter()
        .map(|r| (model.linear_predictor(&r.impression), r.positive))
        .collect()
}

pub fn roc(model: &BinaryModel, calib: &LabeledSet) -> Result<RocCurve, CalibrationError> {
    roc_from_scores(&scores(model, calib))
}

/// What model ranking looks at: area first, then size, then feature names.
#[derive(Debug, Clone, PartialEq)]
pub struct RankKey<'a> {
    pub auc: f64,
    pub n_features: usize,
    pub feature_set_name: &'a str,
}

/// `Greater` means `a` is the better model: larger AUC, then fewer features,
/// then the lexicographically smaller feature-set name.
pub fn rank(a: &RankKey<'_>, b: &RankKey<'_>) -> Ordering {
    a.auc
        .total_cmp(&b.auc)
        .then_with(|| b.n_features.cmp(&a.n_features))
        .then_with(|| b.feature_set_name.cmp(a.feature_set_name))
}

/// Orders two models by their ROC area on a shared calibration set.
pub fn compare(m0: &BinaryModel, m1: &BinaryModel, calib: &LabeledSet) -> Result<Ordering, CalibrationError> {
    let (a, b) = (roc(m0, calib)?, roc(m1, calib)?);
    let (na, nb) = (m0.feature_set_name(), m1.feature_set_name());
    Ok(rank(
        &RankKey { auc: a.auc(), n_features: m0.n_features(), feature_set_name: &na },
        &RankKey { auc: b.auc(), n_features: m1.n_features(), feature_set_name: &nb },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    /// Cut of the chosen curve point (scores `≥ cut` are positive calls).
    pub cut: f64,
    pub tp_rate: f64,
    pub fp_rate: f64,
    pub youden: f64,
    /// Threshold for the strict rule `η > threshold` that reproduces the chosen
    /// point on the calibration scores; halfway to the next lower cut.
    pub decision_threshold: f64,
}

/// The curve point farthest from the diagonal, i.e. maximal `tp − fp`; ties go
/// to the smaller false-positive rate.
pub fn select_threshold(curve: &RocCurve) -> ThresholdChoice {
    let points = curve.points();
    let mut best = 0;
    for (k, p) in points.iter().enumerate().skip(1) {
        let (jk, jb) = (p.tp_rate - p.fp_rate, points[best].tp_rate - points[best].fp_rate);
        if jk > jb || (jk == jb && p.fp_rate < points[best].fp_rate) {
            best = k;
        }
    }
    let chosen = points[best];
    let decision_threshold = if chosen.cut == f64::INFINITY {
        points[1].cut
    } else if let Some(next) = points.get(best + 1) {
        let mid = 0.5 * (chosen.cut + next.cut);
        if mid < chosen.cut && mid > next.cut {
            mid
        } else {
            next.cut
        }
    } else {
        chosen.cut - chosen.cut.abs().max(1.0)
    };
    ThresholdChoice {
        cut: chosen.cut,
        tp_rate: chosen.tp_rate,
        fp_rate: chosen.fp_rate,
        youden: chosen.tp_rate - chosen.fp_rate,
        decision_threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(scored: &[(f64, bool)]) -> f64 {
        let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
        let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    const FOUR: [(f64, bool); 4] = [(0.9, true), (0.7, true), (0.8, false), (0.3, false)];

    #[test]
    fn four_score_example() {
        assert_eq!(pairwise_auc(&FOUR), 0.75);
        let c = roc_from_scores(&FOUR).unwrap();
        assert_eq!(c.auc(), 0.75);
        assert_eq!(c.area_above_diagonal(), 0.25);
        let t = select_threshold(&c);
        assert_eq!(t.youden, 0.5);
        // (fp 0, tp 0.5) at cut 0.9 and (fp 0.5, tp 1) at cut 0.7 tie; smaller fp wins
        assert_eq!((t.cut, t.fp_rate, t.tp_rate), (0.9, 0.0, 0.5));
        assert!(t.decision_threshold < 0.9 && t.decision_threshold > 0.8);
    }

    #[test]
    fn separated_and_tied_scores() {
        let sep = [(3.0, true), (2.0, true), (1.0, false), (0.0, false)];
        let c = roc_from_scores(&sep).unwrap();
        assert_eq!(c.auc(), 1.0);
        let t = select_threshold(&c);
        assert_eq!((t.tp_rate, t.fp_rate, t.youden), (1.0, 0.0, 1.0));
        assert_eq!(t.cut, 2.0);
        assert_eq!(t.decision_threshold, 1.5);

        let tied = [(0.4, true), (0.4, false), (0.4, true), (0.4, false)];
        let c = roc_from_scores(&tied).unwrap();
        assert_eq!(c.points().len(), 2);
        assert_eq!(c.auc(), 0.5);
        let t = select_threshold(&c);
        assert_eq!((t.fp_rate, t.youden), (0.0, 0.0));
        // the (0, 0) anchor: nothing on the calibration set is accepted
        assert_eq!(t.decision_threshold, 0.4);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            roc_from_scores(&[(1.0, true), (2.0, true)]),
            Err(CalibrationError::DegenerateCalibration { positives: 2, negatives: 0 })
        ));
        assert!(roc_from_scores(&[(f64::NAN, true), (2.0, false)]).is_err());
    }

    #[test]
    fn curve_is_monotone_and_anchored() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scored: Vec<_> = (0..150)
            .map(|_| ((rng.random_range(0..20) as f64) / 4.0, rng.random_bool(0.3)))
            .chain([(0.0, true), (0.0, false)])
            .collect();
        let c = roc_from_scores(&scored).unwrap();
        let pts = c.points();
        assert_eq!((pts[0].fp_rate, pts[0].tp_rate), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fp_rate, last.tp_rate), (1.0, 1.0));
        for w in pts.windows(2) {
            assert!(w[1].cut < w[0].cut);
            assert!(w[1].fp_rate >= w[0].fp_rate && w[1].tp_rate >= w[0].tp_rate);
        }
        assert!((c.auc() - pairwise_auc(&scored)).abs() < 1e-12);
    }

    #[test]
    fn decision_threshold_reproduces_the_chosen_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let scored: Vec<_> = (0..60)
                .map(|_| {
                    let y = rng.random_bool(0.4);
                    (rng.random_range(-2.0..2.0) + if y { 0.8 } else { 0.0 }, y)
                })
                .chain([(0.0, true), (0.1, false)])
                .collect();
            let c = roc_from_scores(&scored).unwrap();
            let t = select_threshold(&c);
            let tp = scored.iter().filter(|s| s.1 && s.0 > t.decision_threshold).count();
            let fp = scored.iter().filter(|s| !s.1 && s.0 > t.decision_threshold).count();
            assert_eq!(tp as f64 / c.positives() as f64, t.tp_rate);
            assert_eq!(fp as f64 / c.negatives() as f64, t.fp_rate);
        }
    }

    #[test]
    fn rank_tie_rules() {
        let a = RankKey { auc: 0.8, n_features: 30, feature_set_name: "z" };
        let b = RankKey { auc: 0.6, n_features: 1, feature_set_name: "a" };
        assert_eq!(rank(&a, &b), Ordering::Greater);
        let small = RankKey { auc: 0.7, n_features: 10, feature_set_name: "z" };
        let big = RankKey { auc: 0.7, n_features: 20, feature_set_name: "a" };
        assert_eq!(rank(&small, &big), Ordering::Greater);
        let x = RankKey { auc: 0.7, n_features: 10, feature_set_name: "a" };
        assert_eq!(rank(&x, &small), Ordering::Greater);
        assert_eq!(rank(&x, &x), Ordering::Equal);
    }

    #[test]
    fn csv_export() {
        let c = roc_from_scores(&FOUR).unwrap();
        let mut out = Vec::new();
        c.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("cut,fp_rate,tp_rate\ninf,0,0\n0.9,0,0.5\n"));
    }
}
