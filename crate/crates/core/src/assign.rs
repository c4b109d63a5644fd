//! One-to-one matching of targets onto proposals.
//!
//! The solver is the shortest-augmenting-path form of Kuhn–Munkres with
//! row/column potentials. It works directly on rectangular `N × M`
//! matrices with `N <= M`, adding one row per phase.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{MatchResult, PointSet, ProposalSet};

/// Dense `N × M` cost matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub n_targets: usize,
    pub m_proposals: usize,
    pub values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n_targets: usize, m_proposals: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_targets * m_proposals {
            return Err(Error::Shape(format!(
                "{} values for a {n_targets}×{m_proposals} matrix",
                values.len()
            )));
        }
        if n_targets > m_proposals {
            return Err(Error::Contract(format!(
                "{n_targets} targets exceed {m_proposals} proposals; raise proposal density"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix entry".into()));
        }
        Ok(Self {
            n_targets,
            m_proposals,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("ragged cost rows".into()));
        }
        Self::new(n, m, rows.concat())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m_proposals + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m_proposals..(i + 1) * self.m_proposals]
    }

    /// Sum of the entries selected by `assignment`.
    pub fn cost_of(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

/// `D[i][j] = ||p_i - p̂_j|| - score_weight · ĉ_j`.
pub fn build_cost_matrix(targets: &PointSet, proposals: &ProposalSet, score_weight: f64) -> Result<CostMatrix> {
    if !(score_weight >= 0.0 && score_weight.is_finite()) {
        return Err(Error::Contract(format!("score weight {score_weight} must be finite and >= 0")));
    }
    let n = targets.len();
    let m = proposals.len();
    if n > m {
        return Err(Error::Contract(format!(
            "{n} targets exceed {m} proposals; raise proposal density (smaller stride)"
        )));
    }
    let mut values = Vec::with_capacity(n * m);
    for t in targets.iter() {
        for p in &proposals.proposals {
            values.push(t.distance(&p.position) - score_weight * p.score);
        }
    }
    CostMatrix::new(n, m, values)
}

/// Minimum-cost injective assignment of every row to a distinct column.
pub fn hungarian_match(cost: &CostMatrix) -> MatchResult {
    let n = cost.n_targets;
    let m = cost.m_proposals;
    if n == 0 {
        return MatchResult::from_assignment(Vec::new(), m, 0.0);
    }
    // 1-based; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut col_owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut min_slack = vec![0.0f64; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        min_slack.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let row = cost.row(i0 - 1);
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        // Flip the augmenting path back to the source.
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if col_owner[j] > 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    let total = cost.cost_of(&assignment);
    MatchResult::from_assignment(assignment, m, total)
}

/// Cost matrix then assignment, the training-time matcher.
pub fn match_targets(targets: &PointSet, proposals: &ProposalSet, score_weight: f64) -> Result<MatchResult> {
    Ok(hungarian_match(&build_cost_matrix(targets, proposals, score_weight)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{AnchorGridMeta, Point2D, ScoredProposal};
    use crate::net::{forward, ModelParams, NetHyper};
    use crate::synth::Field;
    use proptest::prelude::*;

    /// Exhaustive minimum over all injections rows → columns.
    pub(crate) fn brute_force_min(cost: &CostMatrix) -> f64 {
        fn rec(c: &CostMatrix, i: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if i == c.n_targets {
                *best = best.min(acc);
                return;
            }
            for j in 0..c.m_proposals {
                if !used[j] {
                    used[j] = true;
                    rec(c, i + 1, used, acc + c.get(i, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.m_proposals], 0.0, &mut best);
        if cost.n_targets == 0 {
            0.0
        } else {
            best
        }
    }

    #[test]
    fn tiny_fixtures() {
        let r = hungarian_match(&CostMatrix::from_rows(&[vec![3.0]]).unwrap());
        assert_eq!((r.assignment, r.total_cost), (vec![0], 3.0));
        let r = hungarian_match(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap());
        assert_eq!((r.assignment, r.total_cost), (vec![0, 1], 2.0));
    }

    #[test]
    fn more_targets_than_proposals_rejected() {
        let err = CostMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap_err();
        assert!(err.to_string().contains("raise proposal density"));
    }

    fn zero_model_proposals() -> ProposalSet {
        let params = ModelParams::zeros(NetHyper::default());
        forward(&params, &Field::zeros(16, 16)).unwrap().0
    }

    #[test]
    fn cost_rows_are_distances_without_score_weight() {
        let props = zero_model_proposals();
        let target = props.grid_meta.anchor_center(5);
        let d = build_cost_matrix(&PointSet::new(vec![target]), &props, 0.0).unwrap();
        for j in 0..props.len() {
            assert_eq!(d.get(0, j), target.distance(&props.grid_meta.anchor_center(j)));
        }
        assert_eq!(d.get(0, 5), 0.0);
        let d1 = build_cost_matrix(&PointSet::new(vec![target]), &props, 1.0).unwrap();
        for j in 0..props.len() {
            assert_eq!(d1.get(0, j), d.get(0, j) - 0.5);
        }
    }

    #[test]
    fn matches_brute_force_on_5x9() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let values = (0..45).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = CostMatrix::new(5, 9, values).unwrap();
            assert_eq!(hungarian_match(&c).total_cost, brute_force_min(&c));
        }
    }

    #[test]
    fn scene_matching_partitions() {
        let grid = AnchorGridMeta::new(8, 8, 4);
        let props = ProposalSet {
            proposals: (0..4)
                .map(|j| ScoredProposal {
                    position: grid.anchor_center(j),
                    score: 0.5,
                    anchor_index: j,
                })
                .collect(),
            grid_meta: grid,
        };
        let targets = PointSet::new(vec![Point2D::new(6.0, 6.5), Point2D::new(1.0, 2.0)]);
        let r = match_targets(&targets, &props, 0.05).unwrap();
        assert_eq!(r.assignment, vec![3, 0]);
        assert_eq!(r.negative_set, vec![1, 2]);
    }

    fn matrix(max_n: usize, max_m: usize) -> impl Strategy<Value = CostMatrix> {
        (1..=max_m).prop_flat_map(move |m| {
            (0..=m.min(max_n)).prop_flat_map(move |n| {
                proptest::collection::vec(-20i32..20, n * m)
                    .prop_map(move |v| CostMatrix::new(n, m, v.into_iter().map(f64::from).collect()).unwrap())
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn optimal_against_enumeration(c in matrix(7, 9)) {
            let r = hungarian_match(&c);
            prop_assert_eq!(r.total_cost, brute_force_min(&c));
            prop_assert_eq!(r.negative_set.len(), c.m_proposals - c.n_targets);
            prop_assert_eq!(r.positive_set.len(), c.n_targets);
        }

        #[test]
        fn row_permutation_equivariance(c in matrix(6, 8), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..c.n_targets).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let rows: Vec<f64> = perm.iter().flat_map(|&i| c.row(i).to_vec()).collect();
            let pc = CostMatrix::new(c.n_targets, c.m_proposals, rows).unwrap();
            let a = hungarian_match(&c);
            let b = hungarian_match(&pc);
            prop_assert_eq!(a.total_cost, b.total_cost);
            // Assignment of permuted row k is an optimal column for original row perm[k].
            let remapped: Vec<usize> = {
                let mut out = vec![0; c.n_targets];
                for (k, &i) in perm.iter().enumerate() {
                    out[i] = b.assignment[k];
                }
                out
            };
            prop_assert_eq!(c.cost_of(&remapped), a.total_cost);
        }

        #[test]
        fn constant_shift(c in matrix(6, 8), shift in -10i32..10) {
            let shifted = CostMatrix::new(
                c.n_targets,
                c.m_proposals,
                c.values.iter().map(|v| v + f64::from(shift)).collect(),
            ).unwrap();
            let a = hungarian_match(&c);
            let b = hungarian_match(&shifted);
            prop_assert_eq!(b.total_cost, a.total_cost + c.n_targets as f64 * f64::from(shift));
            prop_assert_eq!(c.cost_of(&b.assignment), a.total_cost);
        }
    }
}
