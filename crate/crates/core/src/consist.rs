//! Consistent pseudo-points from a teacher's proposals.
//!
//! Positive teacher proposals become pseudo-points. Position Aggregation
//! replaces each pseudo-point position with the mean of itself and the
//! regressed positions of its `K` nearest neighbouring anchors, and
//! Instance-wise Uncertainty Calibration gives each one a weight that rises
//! linearly from 0 at score 0.5 to 1 at score 1.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{AnchorGridMeta, Point2D, PointSet, ProposalSet};

/// Teacher scores at or above this are positive.
pub const POSITIVE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PAConfig {
    /// Number of auxiliary points `K`; a perfect square (0, 4, 16, ...).
    pub k_aux: usize,
}

impl Default for PAConfig {
    fn default() -> Self {
        Self { k_aux: 4 }
    }
}

impl PAConfig {
    pub fn validate(&self) -> Result<()> {
        let r = (self.k_aux as f64).sqrt().round() as usize;
        if r * r != self.k_aux {
            return Err(Error::config("k_aux", format!("{} is not a perfect square", self.k_aux)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistentPseudoLabels {
    pub points: PointSet,
    pub weights: Vec<f64>,
    pub source_scores: Vec<f64>,
    pub source_anchor_indices: Vec<usize>,
    /// Auxiliaries actually used per point (fewer than `K` at borders).
    pub aux_counts: Vec<usize>,
}

impl ConsistentPseudoLabels {
    pub fn empty() -> Self {
        Self {
            points: PointSet::default(),
            weights: Vec::new(),
            source_scores: Vec::new(),
            source_anchor_indices: Vec::new(),
            aux_counts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same points with every weight set to 1, i.e. calibration disabled.
    pub fn with_unit_weights(mut self) -> Self {
        self.weights.iter_mut().for_each(|w| *w = 1.0);
        self
    }

    /// Mirrors the points for a horizontally flipped view of `width` pixels.
    pub fn flipped(&self, width: usize) -> Self {
        let mut out = self.clone();
        out.points = self.points.iter().map(|&p| crate::synth::flip_point(p, width)).collect();
        out
    }
}

/// Positive proposals `(anchor_index, score)` in anchor order.
pub fn extract_pseudo_points(teacher: &ProposalSet, threshold: f64) -> Vec<(usize, f64)> {
    teacher
        .proposals
        .iter()
        .filter(|p| p.score >= threshold)
        .map(|p| (p.anchor_index, p.score))
        .collect()
}

/// Cell offsets of the `k_aux` anchors nearest the cell at `(row, col)`.
///
/// Offsets are ranked by grid distance, then by distance from their anchor
/// centre to `position`, then lexicographically. With `K = 4` this is the
/// four edge-adjacent cells. Offsets falling off the grid are dropped rather
/// than replaced.
pub fn auxiliary_anchors(grid: &AnchorGridMeta, anchor: usize, position: Point2D, k_aux: usize) -> Vec<usize> {
    if k_aux == 0 {
        return Vec::new();
    }
    let (row, col) = grid.cell(anchor);
    let reach = (k_aux as f64).sqrt().ceil() as isize;
    let s = grid.stride as f64;
    let mut offsets = Vec::with_capacity(((2 * reach + 1) * (2 * reach + 1)) as usize);
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            if dr == 0 && dc == 0 {
                continue;
            }
            let r = row as isize + dr;
            let c = col as isize + dc;
            let center = Point2D::new((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
            offsets.push((dr * dr + dc * dc, center.squared_distance(&position), dr, dc));
        }
    }
    offsets.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then((a.2, a.3).cmp(&(b.2, b.3))));
    offsets
        .into_iter()
        .take(k_aux)
        .filter_map(|(_, _, dr, dc)| {
            let r = row as isize + dr;
            let c = col as isize + dc;
            (r >= 0 && c >= 0 && (r as usize) < grid.rows && (c as usize) < grid.cols).then(|| grid.index(r as usize, c as usize))
        })
        .collect()
}

/// Aggregated position of the pseudo-point at `anchor` and the number of
/// auxiliaries that contributed.
pub fn position_aggregate(anchor: usize, teacher: &ProposalSet, cfg: &PAConfig) -> (Point2D, usize) {
    let own = teacher.proposals[anchor].position;
    if cfg.k_aux == 0 {
        return (own, 0);
    }
    let aux = auxiliary_anchors(&teacher.grid_meta, anchor, own, cfg.k_aux);
    let (mut sx, mut sy) = (own.x, own.y);
    for &j in &aux {
        let p = teacher.proposals[j].position;
        sx += p.x;
        sy += p.y;
    }
    let n = (aux.len() + 1) as f64;
    (Point2D::new(sx / n, sy / n), aux.len())
}

/// `(score - 0.5) / 0.5` for a positive score.
pub fn iuc_weight(score: f64) -> Result<f64> {
    if !(POSITIVE_THRESHOLD..=1.0).contains(&score) {
        return Err(Error::Contract(format!("calibration score {score} outside [0.5, 1]")));
    }
    Ok((score - 0.5) / 0.5)
}

/// Extraction, aggregation and weighting in one pass.
pub fn build_consistent_labels(teacher: &ProposalSet, cfg: &PAConfig) -> Result<ConsistentPseudoLabels> {
    cfg.validate()?;
    let positives = extract_pseudo_points(teacher, POSITIVE_THRESHOLD);
    let mut out = ConsistentPseudoLabels::empty();
    for (anchor, score) in positives {
        let (p, used) = position_aggregate(anchor, teacher, cfg);
        out.points.points.push(p);
        out.weights.push(iuc_weight(score)?);
        out.source_scores.push(score);
        out.source_anchor_indices.push(anchor);
        out.aux_counts.push(used);
    }
    Ok(out)
}

/// Per-coordinate empirical variances of one draw and of a `K`-draw mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceProbe {
    pub single: [f64; 2],
    pub aggregated: [f64; 2],
}

/// Monte Carlo check of variance reduction under averaging: each trial draws
/// `k` points with i.i.d. `N(0, sigma²)` coordinates and averages them.
pub fn variance_probe(sigma: f64, k: usize, trials: usize, seed: u64) -> Result<VarianceProbe> {
    if k == 0 || trials < 2 {
        return Err(Error::Contract("variance probe needs k >= 1 and trials >= 2".into()));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Contract(format!("sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut single = [Welford::default(), Welford::default()];
    let mut agg = [Welford::default(), Welford::default()];
    for _ in 0..trials {
        let mut sum = [0.0; 2];
        for i in 0..k {
            let d = [normal.sample(&mut rng), normal.sample(&mut rng)];
            if i == 0 {
                single[0].push(d[0]);
                single[1].push(d[1]);
            }
            sum[0] += d[0];
            sum[1] += d[1];
        }
        agg[0].push(sum[0] / k as f64);
        agg[1].push(sum[1] / k as f64);
    }
    Ok(VarianceProbe {
        single: [single[0].variance(), single[1].variance()],
        aggregated: [agg[0].variance(), agg[1].variance()],
    })
}

#[derive(Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        self.m2 / (self.n - 1) as f64
    }
}
