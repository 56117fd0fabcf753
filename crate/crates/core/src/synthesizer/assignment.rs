//! Maximum-weight bipartite assignment (Kuhn–Munkres).
//!
//! Rectangular inputs are padded to a square matrix with zero-weight slots.
//! Among assignments with the same total, the one that is lexicographically
//! smallest in row order (row 0 gets the lowest column possible, then row 1,
//! ...) is returned, so results never depend on incidental solver order.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AssignmentError {
    #[error("row {row} has {found} columns, expected {expected}")]
    Ragged { row: usize, found: usize, expected: usize },
    #[error("weight at ({row}, {col}) is {value}; weights must be finite and non-negative")]
    BadWeight { row: usize, col: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Matched (row, column) pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of matched weights, accumulated in row order.
    pub total: f64,
}

impl Assignment {
    pub fn column_for(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|(r, _)| *r == row).map(|(_, c)| *c)
    }

    pub fn row_for(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|(_, c)| *c == col).map(|(r, _)| *r)
    }
}

/// Finds an assignment of rows to columns maximizing the summed weight.
pub fn max_weight_match(weights: &[Vec<f64>]) -> Result<Assignment, AssignmentError> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    for (r, row) in weights.iter().enumerate() {
        if row.len() != cols {
            return Err(AssignmentError::Ragged {
                row: r,
                found: row.len(),
                expected: cols,
            });
        }
        for (c, &value) in row.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(AssignmentError::BadWeight { row: r, col: c, value });
            }
        }
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total: 0.0,
        });
    }

    let n = rows.max(cols);
    let padded: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            (0..n)
                .map(|c| if r < rows && c < cols { weights[r][c] } else { 0.0 })
                .collect()
        })
        .collect();

    let mut best = solve(&padded, &[]);
    let mut best_total = row_order_total(&padded, &best);

    // Walk rows in order and pull each one to the lowest column that still
    // admits an optimal completion.
    for row in 0..n {
        let prefix: Vec<usize> = best[..row].to_vec();
        for col in 0..best[row] {
            if prefix.contains(&col) {
                continue;
            }
            let mut fixed = prefix.clone();
            fixed.push(col);
            let candidate = solve(&padded, &fixed);
            let total = row_order_total(&padded, &candidate);
            if total >= best_total {
                best = candidate;
                best_total = total;
                break;
            }
        }
    }

    let pairs: Vec<(usize, usize)> = best
        .iter()
        .enumerate()
        .filter(|(r, c)| *r < rows && **c < cols)
        .map(|(r, c)| (r, *c))
        .collect();
    let total = pairs.iter().fold(0.0, |acc, &(r, c)| acc + weights[r][c]);
    Ok(Assignment { pairs, total })
}

fn row_order_total(matrix: &[Vec<f64>], assign: &[usize]) -> f64 {
    assign.iter().enumerate().fold(0.0, |acc, (r, &c)| acc + matrix[r][c])
}

/// Solves the square problem with rows `0..fixed.len()` pinned to `fixed`.
fn solve(matrix: &[Vec<f64>], fixed: &[usize]) -> Vec<usize> {
    let n = matrix.len();
    let free_rows: Vec<usize> = (fixed.len()..n).collect();
    let free_cols: Vec<usize> = (0..n).filter(|c| !fixed.contains(c)).collect();
    let cost: Vec<Vec<f64>> = free_rows
        .iter()
        .map(|&r| free_cols.iter().map(|&c| -matrix[r][c]).collect())
        .collect();
    let sub = hungarian_min(&cost);
    let mut assign = fixed.to_vec();
    assign.extend(sub.into_iter().map(|c| free_cols[c]));
    assign
}

/// Classic O(n^3) potentials formulation for square minimum-cost assignment.
/// Returns the column assigned to each row.
fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based internally; index 0 is the virtual column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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

    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_picks_diagonal() {
        let a = max_weight_match(&[vec![3.0, 1.9], vec![1.1, 2.5]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert!((a.total - 5.5).abs() <= 1e-12);
    }

    #[test]
    fn diagonal_preference() {
        let m: Vec<Vec<f64>> = (0..5)
            .map(|r| (0..5).map(|c| if r == c { 2.0 } else { 0.5 }).collect())
            .collect();
        let a = max_weight_match(&m).unwrap();
        assert_eq!(a.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn single_row_picks_max() {
        let a = max_weight_match(&[vec![0.1, 0.9, 0.5]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]);
    }

    #[test]
    fn tall_matrix_leaves_rows_unmatched() {
        let a = max_weight_match(&[vec![0.2], vec![0.7], vec![0.1]]).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
    }

    #[test]
    fn ties_prefer_lowest_indices() {
        let a = max_weight_match(&[vec![1.0; 3], vec![1.0; 3], vec![1.0; 3]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let zeros = max_weight_match(&[vec![0.0; 2], vec![0.0; 2]]).unwrap();
        assert_eq!(zeros.pairs, vec![(0, 0), (1, 1)]);
        // anti-diagonal strictly better
        let a = max_weight_match(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        let b = max_weight_match(&[vec![1.5, 1.5], vec![1.5, 1.5]]).unwrap();
        assert_eq!(b.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert!(max_weight_match(&[]).unwrap().pairs.is_empty());
        assert!(max_weight_match(&[vec![]]).unwrap().pairs.is_empty());
        assert!(matches!(
            max_weight_match(&[vec![1.0], vec![1.0, 2.0]]),
            Err(AssignmentError::Ragged { .. })
        ));
        assert!(matches!(
            max_weight_match(&[vec![-1.0]]),
            Err(AssignmentError::BadWeight { .. })
        ));
        assert!(matches!(
            max_weight_match(&[vec![f64::NAN]]),
            Err(AssignmentError::BadWeight { .. })
        ));
    }
}
