//! Minimum-cost bipartite assignment (shortest augmenting paths with
//! potentials), with a deterministic lexicographic tie-break.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Injective prediction↔ground-truth pairing. `pairs` is sorted by
/// prediction (row) index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn cost(&self, cost: &Matrix<f64>) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost[(r, c)]).sum()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Row matched to column `col`, if any.
    pub fn row_for_col(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == col).map(|p| p.0)
    }

    /// Column matched to row `row`, if any.
    pub fn col_for_row(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

struct Solution {
    /// Column of each row.
    cols: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Core solver for an `n × m` row-major matrix with `n <= m`.
fn solve(a: &[f64], n: usize, m: usize) -> Solution {
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    Solution {
        cols,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    }
}

/// Optimal cost of the sub-problem with rows `0..=fixed.len()-1` pinned to
/// `fixed`, plus the completion for the remaining rows.
fn solve_pinned(a: &[f64], n: usize, m: usize, fixed: &[usize]) -> (f64, Vec<usize>) {
    let k = fixed.len();
    let free_cols: Vec<usize> = (0..m).filter(|c| !fixed.contains(c)).collect();
    let rn = n - k;
    let rm = free_cols.len();
    let mut sub = Vec::with_capacity(rn * rm);
    for r in k..n {
        for &c in &free_cols {
            sub.push(a[r * m + c]);
        }
    }
    let mut cols = fixed.to_vec();
    let mut total: f64 = fixed.iter().enumerate().map(|(r, &c)| a[r * m + c]).sum();
    if rn > 0 {
        let s = solve(&sub, rn, rm);
        for (i, &c) in s.cols.iter().enumerate() {
            let col = free_cols[c];
            total += a[(k + i) * m + col];
            cols.push(col);
        }
    }
    (total, cols)
}

/// Lexicographically smallest optimal row→column map for `n <= m`.
fn solve_lexicographic(a: &[f64], n: usize, m: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let s = solve(a, n, m);
    let mut cols = s.cols;
    let best: f64 = cols.iter().enumerate().map(|(r, &c)| a[r * m + c]).sum();
    let scale = a.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    let tol = 1e-9 * scale * n as f64;
    for r in 0..n {
        let current = cols[r];
        let fixed = &cols[..r];
        // Only tight edges (zero reduced cost) can appear in an optimal assignment.
        let candidates: Vec<usize> = (0..current)
            .filter(|c| !fixed.contains(c))
            .filter(|&c| a[r * m + c] - s.u[r] - s.v[c] <= tol)
            .collect();
        for c in candidates {
            let mut pinned = fixed.to_vec();
            pinned.push(c);
            let (total, completion) = solve_pinned(a, n, m, &pinned);
            if (total - best).abs() <= tol {
                cols = completion;
                break;
            }
        }
    }
    cols
}

/// Minimum-cost injective assignment of size `min(rows, cols)`. Among
/// optimal assignments the one whose column sequence (taken along the shorter
/// side, in index order) is lexicographically smallest is returned.
pub fn hungarian(cost: &Matrix<f64>) -> Result<Assignment> {
    let (n, m) = cost.shape();
    for r in 0..n {
        for c in 0..m {
            if !cost[(r, c)].is_finite() {
                return Err(Error::NonFiniteCost { row: r, col: c });
            }
        }
    }
    if n == 0 || m == 0 {
        return Ok(Assignment::default());
    }
    let mut pairs: Vec<(usize, usize)> = if n <= m {
        solve_lexicographic(cost.data(), n, m)
            .into_iter()
            .enumerate()
            .collect()
    } else {
        let t = cost.transpose();
        solve_lexicographic(t.data(), m, n)
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let c = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost(&c), 1.0);
    }

    #[test]
    fn zero_diagonal() {
        let mut c = Matrix::filled(5, 5, 1.0);
        for i in 0..5 {
            c[(i, i)] = 0.0;
        }
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(a.cost(&c), 0.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let c = Matrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.cost(&c), 3.0);
        assert_eq!(a.pairs.len(), 2);
        let t = hungarian(&c.transpose()).unwrap();
        assert_eq!(t.cost(&c.transpose()), 3.0);
        assert_eq!(t.pairs.len(), 2);
    }

    #[test]
    fn all_ties_pick_lexicographically_smallest() {
        let c = Matrix::filled(3, 4, 1.0);
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let c = Matrix::filled(4, 2, 1.0);
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn non_finite_is_rejected() {
        let c = Matrix::from_rows(&[vec![1.0, f64::NAN]]);
        assert!(matches!(hungarian(&c), Err(Error::NonFiniteCost { row: 0, col: 1 })));
    }

    #[test]
    fn empty() {
        assert!(hungarian(&Matrix::zeros(0, 3)).unwrap().is_empty());
        assert!(hungarian(&Matrix::zeros(3, 0)).unwrap().is_empty());
    }
}
