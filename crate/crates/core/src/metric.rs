//! Localization precision/recall/F1 at a distance threshold, and count
//! errors over a set of images.

use serde::{Deserialize, Serialize};

use crate::assign::{hungarian_match, CostMatrix};
use crate::error::{Error, Result};
use crate::geom::{Point2D, PointSet, ScoredProposal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl LocalizationReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, threshold: f64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            threshold,
        }
    }

    /// Pools counts across images (micro average).
    pub fn merge(reports: &[LocalizationReport], threshold: f64) -> Self {
        let (tp, fp, fn_) = reports.iter().fold((0, 0, 0), |a, r| (a.0 + r.tp, a.1 + r.fp, a.2 + r.fn_));
        Self::from_counts(tp, fp, fn_, threshold)
    }
}

/// Number of true positives between two point sets: the largest one-to-one
/// matching using only pairs within `sigma`, ties broken by least total
/// distance.
pub fn count_true_positives(gt: &[Point2D], pred: &[Point2D], sigma: f64) -> usize {
    if gt.is_empty() || pred.is_empty() {
        return 0;
    }
    let (rows, cols) = if gt.len() <= pred.len() { (gt, pred) } else { (pred, gt) };
    // Any infeasible pair costs more than every feasible matching combined,
    // so the optimum first maximises the number of feasible pairs.
    let infeasible = sigma * (rows.len() as f64 + 1.0) + 1.0;
    let mut values = Vec::with_capacity(rows.len() * cols.len());
    let mut any = false;
    for r in rows {
        for c in cols {
            let d = r.distance(c);
            if d <= sigma {
                any = true;
                values.push(d);
            } else {
                values.push(infeasible);
            }
        }
    }
    if !any {
        return 0;
    }
    let cost = CostMatrix::new(rows.len(), cols.len(), values).expect("rows <= cols, finite");
    let m = hungarian_match(&cost);
    m.assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| rows[i].distance(&cols[j]) <= sigma)
        .count()
}

/// Scores one image: predictions are the proposals at or above
/// `score_threshold`.
pub fn localization_report(gt: &PointSet, pred: &[ScoredProposal], score_threshold: f64, sigma: f64) -> Result<LocalizationReport> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Contract(format!("distance threshold {sigma} must be > 0")));
    }
    let kept: Vec<Point2D> = pred.iter().filter(|p| p.score >= score_threshold).map(|p| p.position).collect();
    let tp = count_true_positives(&gt.points, &kept, sigma);
    Ok(LocalizationReport::from_counts(tp, kept.len() - tp, gt.len() - tp, sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountingReport {
    pub mae: f64,
    /// Root of the mean squared count error.
    pub mse: f64,
    pub n_images: usize,
}

/// Count errors over `(gt_count, pred_count)` pairs.
pub fn counting_report(pairs: &[(usize, usize)]) -> Result<CountingReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("counting report needs at least one image".into()));
    }
    let n = pairs.len() as f64;
    let (abs, sq) = pairs.iter().fold((0.0, 0.0), |(a, s), &(y, yh)| {
        let e = y as f64 - yh as f64;
        (a + e.abs(), s + e * e)
    });
    Ok(CountingReport {
        mae: abs / n,
        mse: (sq / n).sqrt(),
        n_images: pairs.len(),
    })
}
