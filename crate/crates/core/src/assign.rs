//! Minimum-cost assignment on square real cost matrices.

use ordered_float::OrderedFloat;
use pathfinding::prelude::{kuhn_munkres_min, Matrix};

use crate::linalg::Mat;

/// Returns `a` with row `i` assigned to column `a[i]`, minimizing the total cost.
pub fn min_cost_assignment(cost: &Mat) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    if n == 0 {
        return Vec::new();
    }
    let weights = Matrix::from_fn(n, n, |(i, j)| OrderedFloat(cost[(i, j)]));
    kuhn_munkres_min(&weights).1
}
