use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold-free and best-threshold summary of one score list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub max_ba: f64,
    pub best_threshold: f64,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub roc_points: Vec<(f64, f64)>,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "both classes are required (positives {pos}, negatives {neg})"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// ROC curve and its trapezoidal area; tied scores move both rates at once,
/// which credits each tied positive/negative pair with one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(f64, Vec<(f64, f64)>)> {
    let (p, n) = check(scores, labels)?;
    let idx = descending(scores);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut points = vec![(0.0, 0.0)];
    // twice the area in units of one positive times one negative
    let mut area2: u128 = 0;
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        let (tp0, fp0) = (tp, fp);
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let auc = area2 as f64 / (2.0 * p as f64 * n as f64);
    Ok((auc, points))
}

/// Trapezoidal area of a ROC polyline.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// `TP/(2(TP+FN)) + TN/(2(TN+FP))`.
pub fn balanced_accuracy(tp: usize, fn_: usize, tn: usize, fp: usize) -> Result<f64> {
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(Error::invalid("balanced accuracy needs both classes"));
    }
    Ok(tp as f64 / (2.0 * (tp + fn_) as f64) + tn as f64 / (2.0 * (tn + fp) as f64))
}

/// Best balanced accuracy over thresholds at `±∞` and the midpoints of
/// consecutive distinct scores, predicting anomalous iff `score ≥ t`.
/// Ties go to the smallest threshold.
pub fn max_balanced_accuracy(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    let (p, n) = check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // threshold -inf: everything predicted anomalous
    let (mut tp, mut tn) = (p as u64, 0u64);
    // BA·2pn = tp·n + tn·p, compared exactly
    let key = |tp: u64, tn: u64| tp as u128 * n as u128 + tn as u128 * p as u128;
    let (mut best, mut best_t) = (key(tp, tn), f64::NEG_INFINITY);
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] == 1 {
                tp -= 1;
            } else {
                tn += 1;
            }
            k += 1;
        }
        let t = if k < idx.len() {
            s + (scores[idx[k]] - s) / 2.0
        } else {
            f64::INFINITY
        };
        let v = key(tp, tn);
        if v > best {
            best = v;
            best_t = t;
        }
    }
    Ok((best as f64 / (2.0 * p as f64 * n as f64), best_t))
}

pub fn evaluate(scores: &[f64], labels: &[u8]) -> Result<EvalReport> {
    let (auc, roc_points) = roc_auc(scores, labels)?;
    let (max_ba, best_threshold) = max_balanced_accuracy(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    Ok(EvalReport {
        auc,
        max_ba,
        best_threshold,
        roc_points,
        n_pos,
        n_neg: labels.len() - n_pos,
    })
}

pub fn write_summary_csv<W: Write>(w: W, r: &EvalReport) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["metric", "value"])?;
    for (k, v) in [
        ("auc", format!("{:.12}", r.auc)),
        ("max_ba", format!("{:.12}", r.max_ba)),
        ("best_threshold", format!("{:.8e}", r.best_threshold)),
        ("n_pos", r.n_pos.to_string()),
        ("n_neg", r.n_neg.to_string()),
    ] {
        wr.write_record([k, v.as_str()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_roc_csv<W: Write>(w: W, r: &EvalReport) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["fpr", "tpr"])?;
    for (f, t) in &r.roc_points {
        wr.write_record([format!("{f:.12}"), format!("{t:.12}")])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_fixtures() {
        let (a, pts) = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap().0, 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap().0, 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn ba_fixtures() {
        assert!((balanced_accuracy(8, 2, 9, 1).unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(balanced_accuracy(5, 0, 5, 0).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(5, 0, 0, 5).unwrap(), 0.5);
        assert!(balanced_accuracy(0, 0, 1, 1).is_err());
        assert_eq!(max_balanced_accuracy(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap().0, 1.0);
        let (ba, t) = max_balanced_accuracy(&[0.9, 0.2, 0.8, 0.1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(ba, 0.5);
        assert_eq!(t, f64::NEG_INFINITY);
    }

    proptest! {
        #[test]
        fn roc_is_monotone_and_matches_trapezoid(
            s in prop::collection::vec(0u8..20, 2..100),
            l in prop::collection::vec(0u8..2, 2..100),
        ) {
            let n = s.len().min(l.len());
            let (s, mut l): (Vec<f64>, Vec<u8>) = (s[..n].iter().map(|&v| v as f64).collect(), l[..n].to_vec());
            l[0] = 0;
            l[1] = 1;
            let r = evaluate(&s, &l).unwrap();
            for w in r.roc_points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            prop_assert!((trapezoid_area(&r.roc_points) - r.auc).abs() < 1e-12);
            prop_assert!(r.max_ba >= 0.5);
        }

        #[test]
        fn ba_is_mean_of_rates(tp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50, fp in 0usize..50) {
            prop_assume!(tp + fn_ > 0 && tn + fp > 0);
            let sens = tp as f64 / (tp + fn_) as f64;
            let spec = tn as f64 / (tn + fp) as f64;
            prop_assert!((balanced_accuracy(tp, fn_, tn, fp).unwrap() - 0.5 * (sens + spec)).abs() < 1e-12);
        }
    }
}
