//! Minimum-cost assignment (Hungarian algorithm, shortest augmenting path
//! form with row/column potentials), O(n^3) on a square matrix.
//!
//! Among all optimal assignments the lexicographically smallest one is
//! returned: row 0 takes the lowest column it can while staying optimal,
//! then row 1, and so on. Candidate columns are screened with the optimal
//! dual potentials (an edge with positive reduced cost is in no optimal
//! assignment) and confirmed by re-solving the reduced problem.

const INF: f64 = f64::INFINITY;

#[derive(Debug, Clone)]
pub struct Solution {
    /// `assignment[row] = column`.
    pub assignment: Vec<usize>,
    pub total: f64,
    row_potential: Vec<f64>,
    col_potential: Vec<f64>,
}

/// Plain Hungarian solve of a square matrix given as a row-major slice.
fn solve_square(cost: &[f64], n: usize) -> Solution {
    if n == 0 {
        return Solution { assignment: Vec::new(), total: 0.0, row_potential: Vec::new(), col_potential: Vec::new() };
    }
    debug_assert_eq!(cost.len(), n * n);
    // 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Solution { assignment, total, row_potential: u[1..].to_vec(), col_potential: v[1..].to_vec() }
}

/// Cost of the optimal assignment on the sub-matrix of `rows` x `cols`.
fn solve_sub(cost: &[f64], n: usize, rows: &[usize], cols: &[usize]) -> Solution {
    let k = rows.len();
    let mut sub = Vec::with_capacity(k * k);
    for &r in rows {
        sub.extend(cols.iter().map(|&c| cost[r * n + c]));
    }
    solve_square(&sub, k)
}

/// Lexicographically smallest optimal assignment of a square `n x n` matrix.
/// Only the first `ordered_rows` rows take part in tie-breaking; the rest
/// (padding) take whatever remains.
pub fn solve_lexicographic(cost: &[f64], n: usize, ordered_rows: usize) -> Solution {
    let first = solve_square(cost, n);
    if n <= 1 {
        return first;
    }
    let scale = cost.iter().fold(1.0_f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * n as f64;
    let (u, v) = (&first.row_potential, &first.col_potential);

    let mut fixed: Vec<Option<usize>> = vec![None; n];
    let mut free_rows: Vec<usize> = (0..n).collect();
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut current = first.assignment.clone();
    let mut remaining = first.total;

    for row in 0..ordered_rows.min(n) {
        let incumbent = current[row];
        let mut choice = incumbent;
        let rows_left: Vec<usize> = free_rows.iter().copied().filter(|&r| r != row).collect();
        for &col in free_cols.iter().filter(|&&c| c < incumbent) {
            let c = cost[row * n + col];
            if c - u[row] - v[col] > tol {
                continue;
            }
            let cols_left: Vec<usize> = free_cols.iter().copied().filter(|&x| x != col).collect();
            let sub = solve_sub(cost, n, &rows_left, &cols_left);
            if c + sub.total <= remaining + tol {
                choice = col;
                for (k, &r) in rows_left.iter().enumerate() {
                    current[r] = cols_left[sub.assignment[k]];
                }
                break;
            }
        }
        fixed[row] = Some(choice);
        remaining -= cost[row * n + choice];
        free_rows.retain(|&r| r != row);
        free_cols.retain(|&c| c != choice);
    }
    for r in free_rows {
        fixed[r] = Some(current[r]);
    }
    let assignment: Vec<usize> = fixed.into_iter().map(|c| c.expect("every row assigned")).collect();
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Solution { assignment, total, row_potential: first.row_potential, col_potential: first.col_potential }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == n {
                return 0.0;
            }
            let mut best = INF;
            for c in 0..n {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[row * n + c] + rec(cost, n, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        rec(cost, n, 0, &mut vec![false; n])
    }

    #[test]
    fn small_known_instance() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let s = solve_square(&cost, 3);
        assert_eq!(s.total, 5.0);
        assert_eq!(s.total, brute(&cost, 3));
    }

    #[test]
    fn all_equal_costs_give_identity() {
        let cost = vec![1.0; 16];
        assert_eq!(solve_lexicographic(&cost, 4, 4).assignment, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_prefer_lower_columns_for_earlier_rows() {
        // Both [0->1, 1->0] and [0->0, 1->1] cost 2.
        let cost = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(solve_lexicographic(&cost, 2, 2).assignment, vec![0, 1]);
        let cost = [2.0, 1.0, 1.0, 0.0];
        assert_eq!(solve_lexicographic(&cost, 2, 2).assignment, vec![0, 1]);
    }

    #[test]
    fn potentials_are_dual_feasible() {
        let cost = [7.0, 3.0, 9.0, 2.0, 8.0, 4.0, 6.0, 1.0, 5.0];
        let s = solve_square(&cost, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert!(cost[i * 3 + j] - s.row_potential[i] - s.col_potential[j] >= -1e-12);
            }
        }
        assert_eq!(s.total, brute(&cost, 3));
    }
}
