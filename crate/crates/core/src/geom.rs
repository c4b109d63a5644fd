//! Planar points, anchor grids and proposal containers shared by every stage.
//!
//! Coordinates are continuous pixel units with the origin at the top-left
//! corner of the field; `x` grows to the right and `y` grows downward.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn squared_distance(&self, other: &Point2D) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        euclidean_distance(*self, *other)
    }
}

/// Straight-line distance between two points.
pub fn euclidean_distance(a: Point2D, b: Point2D) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Ordered collection of head positions (ground truth or pseudo-labels).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<Point2D>,
}

impl PointSet {
    pub fn new(points: Vec<Point2D>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point2D> {
        self.points.iter()
    }
}

impl From<Vec<Point2D>> for PointSet {
    fn from(points: Vec<Point2D>) -> Self {
        Self { points }
    }
}

impl FromIterator<Point2D> for PointSet {
    fn from_iter<I: IntoIterator<Item = Point2D>>(iter: I) -> Self {
        Self {
            points: iter.into_iter().collect(),
        }
    }
}

/// Layout of the regular anchor grid over a field: one anchor per
/// `stride × stride` cell, anchors indexed in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorGridMeta {
    pub field_height: usize,
    pub field_width: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
}

impl AnchorGridMeta {
    pub fn new(field_height: usize, field_width: usize, stride: usize) -> Self {
        assert!(stride > 0, "anchor stride must be positive");
        Self {
            field_height,
            field_width,
            stride,
            rows: field_height.div_ceil(stride),
            cols: field_width.div_ceil(stride),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn anchor_center(&self, index: usize) -> Point2D {
        let (r, c) = self.cell(index);
        let s = self.stride as f64;
        Point2D::new((c as f64 + 0.5) * s, (r as f64 + 0.5) * s)
    }

    /// Anchor whose cell contains `p`, or `None` outside the grid.
    pub fn locate(&self, p: Point2D) -> Option<usize> {
        if !p.is_finite() || p.x < 0.0 || p.y < 0.0 {
            return None;
        }
        let s = self.stride as f64;
        let c = (p.x / s).floor() as usize;
        let r = (p.y / s).floor() as usize;
        (r < self.rows && c < self.cols).then(|| self.index(r, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    pub position: Point2D,
    pub score: f64,
    pub anchor_index: usize,
}

/// Model output over a grid, exactly one proposal per anchor in index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub proposals: Vec<ScoredProposal>,
    pub grid_meta: AnchorGridMeta,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = Point2D> + '_ {
        self.proposals.iter().map(|p| p.position)
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.proposals.iter().map(|p| p.score)
    }

    /// Proposals at or above `threshold`, in anchor order.
    pub fn confident(&self, threshold: f64) -> Vec<ScoredProposal> {
        self.proposals.iter().filter(|p| p.score >= threshold).copied().collect()
    }
}

/// One-to-one assignment of targets onto proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `assignment[i]` is the proposal matched to target `i`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
    /// Matched proposal indices, ascending.
    pub positive_set: Vec<usize>,
    /// Unmatched proposal indices, ascending.
    pub negative_set: Vec<usize>,
}

impl MatchResult {
    /// Builds the positive/negative partition of `0..m` from an assignment.
    pub fn from_assignment(assignment: Vec<usize>, m: usize, total_cost: f64) -> Self {
        let mut matched = vec![false; m];
        for &j in &assignment {
            matched[j] = true;
        }
        let (positive_set, negative_set) = (0..m).partition(|&j| matched[j]);
        Self {
            assignment,
            total_cost,
            positive_set,
            negative_set,
        }
    }

    pub fn n_targets(&self) -> usize {
        self.assignment.len()
    }
}
