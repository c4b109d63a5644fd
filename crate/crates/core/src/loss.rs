//! Point-set losses for labeled scenes, pseudo-labeled scenes and their
//! weighted sum, together with their partials with respect to every
//! proposal position and score.

use serde::{Deserialize, Serialize};

use crate::consist::ConsistentPseudoLabels;
use crate::error::{Error, Result};
use crate::geom::{MatchResult, PointSet, ProposalSet};

/// Log arguments are clamped to `[LOG_EPS, 1 - LOG_EPS]`.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossFlavor {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of negative classification terms.
    pub lambda1: f64,
    /// Weight of the localization term.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 2e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub flavor: LossFlavor,
    pub l_loc: f64,
    pub l_cls: f64,
    /// `l_cls + lambda2 · l_loc`
    pub total: f64,
    /// `∂total/∂(x̂, ŷ)` per anchor.
    pub pos_grads: Vec<[f64; 2]>,
    /// `∂total/∂ĉ` per anchor.
    pub score_grads: Vec<f64>,
    /// Number of scores that hit the log clamp.
    pub clamp_count: usize,
    pub n_targets: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.score_grads.iter().all(|g| g.is_finite())
            && self.pos_grads.iter().all(|g| g[0].is_finite() && g[1].is_finite())
    }
}

#[inline]
fn clamp_score(c: f64, clamps: &mut usize) -> (f64, bool) {
    if c < LOG_EPS {
        *clamps += 1;
        (LOG_EPS, true)
    } else if c > 1.0 - LOG_EPS {
        *clamps += 1;
        (1.0 - LOG_EPS, true)
    } else {
        (c, false)
    }
}

/// Shared body of both flavours. `weights` scale the positive
/// classification terms; `loc_weights` (if any) scale the squared residuals.
fn point_loss(
    flavor: LossFlavor,
    targets: &PointSet,
    proposals: &ProposalSet,
    matching: &MatchResult,
    cls_weights: Option<&[f64]>,
    loc_weights: Option<&[f64]>,
    w: LossWeights,
) -> Result<LossBreakdown> {
    let n = targets.len();
    let m = proposals.len();
    if matching.assignment.len() != n || matching.positive_set.len() + matching.negative_set.len() != m {
        return Err(Error::Shape(format!(
            "match covers {} targets / {} proposals, inputs have {n} / {m}",
            matching.assignment.len(),
            matching.positive_set.len() + matching.negative_set.len()
        )));
    }
    if m == 0 {
        return Err(Error::Contract("proposal set is empty".into()));
    }
    let mf = m as f64;
    let mut pos_grads = vec![[0.0; 2]; m];
    let mut score_grads = vec![0.0; m];
    let mut clamps = 0usize;

    let mut sum_pos = 0.0;
    for (i, &j) in matching.assignment.iter().enumerate() {
        let wi = cls_weights.map_or(1.0, |ws| ws[i]);
        let (c, clamped) = clamp_score(proposals.proposals[j].score, &mut clamps);
        sum_pos += wi * c.ln();
        if !clamped {
            score_grads[j] = -wi / (mf * c);
        }
    }
    let mut sum_neg = 0.0;
    for &j in &matching.negative_set {
        let (c, clamped) = clamp_score(proposals.proposals[j].score, &mut clamps);
        sum_neg += (1.0 - c).ln();
        if !clamped {
            score_grads[j] = w.lambda1 / (mf * (1.0 - c));
        }
    }
    let l_cls = -(sum_pos + w.lambda1 * sum_neg) / mf;

    let l_loc = if n == 0 {
        0.0
    } else {
        let nf = n as f64;
        let mut acc = 0.0;
        for (i, (&j, t)) in matching.assignment.iter().zip(targets.iter()).enumerate() {
            let li = loc_weights.map_or(1.0, |ws| ws[i]);
            let p = proposals.proposals[j].position;
            let (rx, ry) = (p.x - t.x, p.y - t.y);
            acc += li * (rx * rx + ry * ry);
            let k = 2.0 * w.lambda2 * li / nf;
            pos_grads[j] = [k * rx, k * ry];
        }
        acc / nf
    };

    Ok(LossBreakdown {
        flavor,
        l_loc,
        l_cls,
        total: l_cls + w.lambda2 * l_loc,
        pos_grads,
        score_grads,
        clamp_count: clamps,
        n_targets: n,
    })
}

/// Supervised loss against annotated points.
///
/// `l_loc` is the mean squared distance of each target to its matched
/// proposal; `l_cls` is the cross entropy over all proposals with the
/// negative terms down-weighted by `lambda1`. An empty target set gives
/// `l_loc = 0` and a negatives-only `l_cls`.
pub fn labeled_loss(gt: &PointSet, proposals: &ProposalSet, matching: &MatchResult, w: LossWeights) -> Result<LossBreakdown> {
    point_loss(LossFlavor::Labeled, gt, proposals, matching, None, None, w)
}

/// Loss against teacher pseudo-points; each positive classification term is
/// scaled by its calibration weight. With `weight_loc_loss` the squared
/// residuals are weighted too (off by default).
pub fn unlabeled_loss(
    pseudo: &ConsistentPseudoLabels,
    proposals: &ProposalSet,
    matching: &MatchResult,
    w: LossWeights,
    weight_loc_loss: bool,
) -> Result<LossBreakdown> {
    let loc = weight_loc_loss.then_some(pseudo.weights.as_slice());
    point_loss(
        LossFlavor::Unlabeled,
        &pseudo.points,
        proposals,
        matching,
        Some(&pseudo.weights),
        loc,
        w,
    )
}

/// Joint objective on one proposal set.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub total: f64,
    pub pos_grads: Vec<[f64; 2]>,
    pub score_grads: Vec<f64>,
}

/// `L = L^L + λ·L^U` with matching gradient merge.
pub fn combine(labeled: &LossBreakdown, unlabeled: &LossBreakdown, lambda: f64) -> Result<CombinedLoss> {
    if labeled.score_grads.len() != unlabeled.score_grads.len() {
        return Err(Error::Shape("breakdowns cover different proposal sets".into()));
    }
    Ok(CombinedLoss {
        total: labeled.total + lambda * unlabeled.total,
        pos_grads: labeled
            .pos_grads
            .iter()
            .zip(&unlabeled.pos_grads)
            .map(|(a, b)| [a[0] + lambda * b[0], a[1] + lambda * b[1]])
            .collect(),
        score_grads: labeled
            .score_grads
            .iter()
            .zip(&unlabeled.score_grads)
            .map(|(a, b)| a + lambda * b)
            .collect(),
    })
}

/// The same merge applied to parameter-space gradients, for batches where
/// labeled and unlabeled terms come from different scenes.
pub fn combine_param_grads(labeled: (f64, &[f64]), unlabeled: (f64, &[f64]), lambda: f64) -> (f64, Vec<f64>) {
    let total = labeled.0 + lambda * unlabeled.0;
    let grad = labeled.1.iter().zip(unlabeled.1).map(|(a, b)| a + lambda * b).collect();
    (total, grad)
}
