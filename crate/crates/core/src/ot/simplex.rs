//! Exact discrete OT by the transportation simplex.
//!
//! Northwest-corner start, MODI (u–v potential) pricing, Bland's rule for both
//! the entering and the leaving cell. The basis is kept as a spanning tree of
//! `rows + cols − 1` cells, degenerate zero-flow cells included.

use std::collections::VecDeque;

use super::{check_cost, marginal_error, Marginal, OtError, TransportPlan};
use crate::tensor::Tensor;

pub const MAX_ORACLE_DIM: usize = 16;
const MAX_PIVOTS: usize = 100_000;
const PRICE_TOL: f64 = 1e-12;

struct Basis {
    rows: usize,
    cols: usize,
    flow: Vec<f64>,
    basic: Vec<bool>,
}

impl Basis {
    fn northwest_corner(mu: &[f64], nu: &[f64]) -> Self {
        let (rows, cols) = (mu.len(), nu.len());
        let mut flow = vec![0.0; rows * cols];
        let mut basic = vec![false; rows * cols];
        let mut supply = mu.to_vec();
        let mut demand = nu.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = supply[i].min(demand[j]).max(0.0);
            flow[i * cols + j] = x;
            basic[i * cols + j] = true;
            supply[i] -= x;
            demand[j] -= x;
            if i == rows - 1 && j == cols - 1 {
                break;
            }
            // Advance exactly one index per cell so the basis has rows + cols − 1 cells.
            if i == rows - 1 || (j < cols - 1 && demand[j] <= supply[i]) {
                j += 1;
            } else {
                i += 1;
            }
        }
        Self { rows, cols, flow, basic }
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        // Nodes: rows are 0..rows, columns are rows..rows+cols.
        let mut adj = vec![Vec::new(); self.rows + self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.basic[i * self.cols + j] {
                    adj[i].push(self.rows + j);
                    adj[self.rows + j].push(i);
                }
            }
        }
        adj
    }

    /// Dual potentials with u_0 = 0 and u_i + v_j = M_ij on every basic cell.
    fn potentials(&self, cost: &[f64], adj: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>) {
        let (r, c) = (self.rows, self.cols);
        let mut pot = vec![f64::NAN; r + c];
        let mut queue = VecDeque::new();
        for root in 0..r + c {
            if !pot[root].is_nan() {
                continue;
            }
            pot[root] = 0.0;
            queue.push_back(root);
            while let Some(node) = queue.pop_front() {
                for &next in &adj[node] {
                    if pot[next].is_nan() {
                        let (i, j) = if node < r { (node, next - r) } else { (next, node - r) };
                        pot[next] = cost[i * c + j] - pot[node];
                        queue.push_back(next);
                    }
                }
            }
        }
        (pot[..r].to_vec(), pot[r..].to_vec())
    }

    /// Tree path from column node `j` to row node `i`, as the sequence of cells traversed.
    fn path(&self, adj: &[Vec<usize>], i: usize, j: usize) -> Vec<(usize, usize)> {
        let r = self.rows;
        let start = r + j;
        let mut parent = vec![usize::MAX; r + self.cols];
        parent[start] = start;
        let mut queue = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == i {
                break;
            }
            for &next in &adj[node] {
                if parent[next] == usize::MAX {
                    parent[next] = node;
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = i;
        while node != start {
            let prev = parent[node];
            let cell = if node < r { (node, prev - r) } else { (prev, node - r) };
            cells.push(cell);
            node = prev;
        }
        cells.reverse();
        cells
    }
}

/// Exact minimum of ⟨T, M⟩ over all couplings of `mu` and `nu`.
pub fn exact_ot_oracle(cost: &Tensor, mu: &Marginal, nu: &Marginal) -> Result<TransportPlan, OtError> {
    let largest = mu.len().max(nu.len());
    if largest > MAX_ORACLE_DIM {
        return Err(OtError::DimensionGuard { max: MAX_ORACLE_DIM, got: largest });
    }
    check_cost(cost, mu, nu)?;
    let m = cost.data();
    let mut basis = Basis::northwest_corner(mu.weights(), nu.weights());
    let (r, c) = (basis.rows, basis.cols);
    let mut pivots = 0;
    loop {
        let adj = basis.adjacency();
        let (u, v) = basis.potentials(m, &adj);
        // Bland: the lowest-index improving cell enters.
        let entering = (0..r * c).find(|&k| {
            let (i, j) = (k / c, k % c);
            !basis.basic[k] && m[k] - u[i] - v[j] < -PRICE_TOL
        });
        let Some(k) = entering else { break };
        if pivots == MAX_PIVOTS {
            return Err(OtError::PivotLimit(MAX_PIVOTS));
        }
        pivots += 1;
        let (ei, ej) = (k / c, k % c);
        // Cycle: entering cell (+), then the tree path from column ej back to row ei
        // with alternating signs starting at −.
        let path = basis.path(&adj, ei, ej);
        let minus: Vec<usize> = path.iter().step_by(2).map(|&(i, j)| i * c + j).collect();
        let plus: Vec<usize> = path.iter().skip(1).step_by(2).map(|&(i, j)| i * c + j).collect();
        let theta = minus.iter().map(|&idx| basis.flow[idx]).fold(f64::INFINITY, f64::min);
        let leaving = *minus
            .iter()
            .filter(|&&idx| basis.flow[idx] <= theta)
            .min()
            .expect("cycle has a minus cell");
        for &idx in &minus {
            basis.flow[idx] -= theta;
        }
        for &idx in &plus {
            basis.flow[idx] += theta;
        }
        basis.flow[k] += theta;
        basis.flow[leaving] = 0.0;
        basis.basic[leaving] = false;
        basis.basic[k] = true;
    }
    let flow: Vec<f64> = basis.flow.iter().map(|&x| x.max(0.0)).collect();
    let total = flow.iter().zip(m).map(|(t, m)| t * m).sum();
    let err = marginal_error(&flow, r, c, mu.weights(), nu.weights());
    Ok(TransportPlan {
        plan: Tensor::from_vec(vec![r, c], flow)?,
        cost: total,
        iterations: pivots,
        marginal_error: err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marg(w: &[f64]) -> Marginal {
        Marginal::new(w.to_vec()).unwrap()
    }

    /// Brute-force oracle for 2×2: T11 = t fixes the plan; scan the feasible interval.
    fn two_by_two(m: [f64; 4], mu: [f64; 2], nu: [f64; 2]) -> f64 {
        let lo = (mu[0] - nu[1]).max(0.0);
        let hi = mu[0].min(nu[0]);
        let cost = |t: f64| {
            m[0] * t + m[1] * (mu[0] - t) + m[2] * (nu[0] - t) + m[3] * (mu[1] - nu[0] + t)
        };
        cost(lo).min(cost(hi))
    }

    #[test]
    fn zero_cost() {
        let p = exact_ot_oracle(&Tensor::zeros(&[3, 3]), &Marginal::uniform(3), &marg(&[0.2, 0.3, 0.5])).unwrap();
        assert_eq!(p.cost, 0.0);
        assert!(p.marginal_error < 1e-15);
    }

    #[test]
    fn asymmetric_two_by_two() {
        let m = Tensor::from_rows(&[&[0.0, 2.0], &[1.0, 0.0]]);
        let p = exact_ot_oracle(&m, &marg(&[0.7, 0.3]), &marg(&[0.4, 0.6])).unwrap();
        assert!((p.cost - 0.6).abs() < 1e-12);
        assert!((two_by_two([0.0, 2.0, 1.0, 0.0], [0.7, 0.3], [0.4, 0.6]) - 0.6).abs() < 1e-12);
        for (got, e) in p.plan.data().iter().zip([0.4, 0.3, 0.0, 0.3]) {
            assert!((got - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_two_by_two_enumeration() {
        let cases = [
            ([0.3, 1.1, 0.7, 0.2], [0.25, 0.75], [0.6, 0.4]),
            ([1.0, 0.0, 0.0, 1.0], [0.5, 0.5], [0.5, 0.5]),
            ([0.5, 0.5, 0.5, 0.5], [0.1, 0.9], [0.9, 0.1]),
            ([2.0, 1.5, 0.1, 1.9], [0.45, 0.55], [0.3, 0.7]),
        ];
        for (m, mu, nu) in cases {
            let t = Tensor::from_vec(vec![2, 2], m.to_vec()).unwrap();
            let p = exact_ot_oracle(&t, &marg(&mu), &marg(&nu)).unwrap();
            assert!((p.cost - two_by_two(m, mu, nu)).abs() < 1e-12, "{m:?}");
        }
    }

    #[test]
    fn permutation_assignment_with_uniform_marginals() {
        // Uniform marginals on a permutation-structured cost: optimum is the permutation.
        let d = 5;
        let perm = [3, 0, 4, 1, 2];
        let m = Tensor::from_fn(&[d, d], |k| if perm[k / d] == k % d { 0.0 } else { 1.0 + (k % 3) as f64 });
        let p = exact_ot_oracle(&m, &Marginal::uniform(d), &Marginal::uniform(d)).unwrap();
        assert!(p.cost.abs() < 1e-12);
    }

    #[test]
    fn dimension_guard() {
        let n = MAX_ORACLE_DIM + 1;
        let r = exact_ot_oracle(&Tensor::zeros(&[n, n]), &Marginal::uniform(n), &Marginal::uniform(n));
        assert!(matches!(r, Err(OtError::DimensionGuard { .. })));
    }
}
