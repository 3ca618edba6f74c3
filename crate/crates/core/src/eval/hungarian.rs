//! Optimal one-to-one assignment on rectangular score matrices.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `(row, column)` pairs, one per row when rows <= columns, else one per column.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the matched entries.
    pub objective: f64,
    pub scores: Array2<f64>,
}

impl AssignmentResult {
    /// Column matched to `row`, if any.
    pub fn column_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }

    /// Row matched to `col`, if any.
    pub fn row_of(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == col).map(|p| p.0)
    }
}

/// Minimum-cost assignment of every row of an `n x m` cost matrix (`n <= m`)
/// to a distinct column, via shortest augmenting paths with potentials.
fn min_cost_rows(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    debug_assert!(n <= m);
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Matches `min(m, k)` rows and columns so that the matched sum is maximal
/// (or minimal when `maximize` is false).
pub fn hungarian_match(scores: ArrayView2<'_, f64>, maximize: bool) -> Result<AssignmentResult> {
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::data("assignment matrix contains NaN"));
    }
    if scores.iter().any(|v| v.is_infinite()) {
        return Err(Error::data("assignment matrix contains infinite entries"));
    }
    let (rows, cols) = scores.dim();
    let sign = if maximize { -1.0 } else { 1.0 };
    let transposed = rows > cols;
    let cost = if transposed {
        scores.t().mapv(|v| sign * v)
    } else {
        scores.mapv(|v| sign * v)
    };
    let mut pairs: Vec<(usize, usize)> = if cost.is_empty() {
        Vec::new()
    } else {
        min_cost_rows(&cost)
            .into_iter()
            .enumerate()
            .map(|(r, c)| if transposed { (c, r) } else { (r, c) })
            .collect()
    };
    pairs.sort_unstable();
    let objective = pairs.iter().map(|&(r, c)| scores[[r, c]]).sum();
    Ok(AssignmentResult {
        pairs,
        objective,
        scores: scores.to_owned(),
    })
}
