//! Exact transport solvers used to verify the approximate one.

use super::{CostMatrix, TransportPlan};
use crate::autograd::Mat;
use crate::error::{Error, Result};

/// Largest `m·r` accepted by [`exact_ot`].
pub const EXACT_MAX_CELLS: usize = 64;
/// Largest `m·r` accepted by [`vertex_enumeration_ot`].
pub const ENUMERATION_MAX_CELLS: usize = 12;

const REDUCED_COST_TOL: f64 = 1e-12;

fn check_problem(c: &CostMatrix, a: &[f64], b: &[f64], limit: usize) -> Result<()> {
    let (m, r) = (c.rows(), c.cols());
    if m * r > limit {
        return Err(Error::invalid("size", format!("{m}x{r} problem exceeds the {limit}-cell limit")));
    }
    if a.len() != m || b.len() != r {
        return Err(Error::invalid(
            "marginals",
            format!("lengths {}/{} for a {m}x{r} cost", a.len(), b.len()),
        ));
    }
    if a.iter().chain(b).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("marginals", "entries must be finite and nonnegative"));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::invalid("marginals", format!("masses differ: {sa} vs {sb}")));
    }
    Ok(())
}

/// Transportation simplex: north-west corner start, MODI potentials, Bland's
/// rule on entering and leaving cells.
pub fn exact_ot(c: &CostMatrix, a: &[f64], b: &[f64]) -> Result<TransportPlan> {
    check_problem(c, a, b, EXACT_MAX_CELLS)?;
    let (m, r) = (c.rows(), c.cols());
    let cost = &c.values;
    let mut x = Mat::zeros((m, r));
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(m + r - 1);
    {
        let (mut ra, mut rb) = (a.to_vec(), b.to_vec());
        let (mut i, mut j) = (0, 0);
        loop {
            let q = ra[i].min(rb[j]);
            x[[i, j]] = q;
            ra[i] -= q;
            rb[j] -= q;
            basis.push((i, j));
            if i == m - 1 && j == r - 1 {
                break;
            }
            if i == m - 1 {
                j += 1;
            } else if j == r - 1 || ra[i] <= rb[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let max_pivots = 10_000;
    for _ in 0..max_pivots {
        let (u, v) = potentials(m, r, &basis, cost);
        let entering = (0..m)
            .flat_map(|i| (0..r).map(move |j| (i, j)))
            .find(|&(i, j)| !basis.contains(&(i, j)) && cost[[i, j]] - u[i] - v[j] < -REDUCED_COST_TOL);
        let Some((ei, ej)) = entering else {
            return Ok(TransportPlan {
                values: x.mapv(|v| v.max(0.0)),
                row_marginal: a.to_vec(),
                col_marginal: b.to_vec(),
            });
        };
        // Path in the basis tree from column ej back to row ei; alternating signs
        // starting with "-" on the first path cell.
        let path = tree_path(m, r, &basis, ei, ej);
        let minus: Vec<(usize, usize)> = path.iter().step_by(2).copied().collect();
        let plus: Vec<(usize, usize)> = path.iter().skip(1).step_by(2).copied().collect();
        let theta = minus.iter().map(|&(i, j)| x[[i, j]]).fold(f64::INFINITY, f64::min);
        let leaving = *minus
            .iter()
            .filter(|&&(i, j)| x[[i, j]] == theta)
            .min()
            .expect("cycle has a minus cell");
        x[[ei, ej]] += theta;
        for &(i, j) in &plus {
            x[[i, j]] += theta;
        }
        for &(i, j) in &minus {
            x[[i, j]] -= theta;
        }
        x[[leaving.0, leaving.1]] = 0.0;
        basis.retain(|&cell| cell != leaving);
        basis.push((ei, ej));
    }
    Err(Error::Numerical("transportation simplex did not terminate".into()))
}

/// Row potentials `u` and column potentials `v` with `u_i + v_j = c_ij` on the basis, `u_0 = 0`.
fn potentials(m: usize, r: usize, basis: &[(usize, usize)], cost: &Mat) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; r];
    u[0] = 0.0;
    let mut remaining = basis.len();
    while remaining > 0 {
        remaining = 0;
        for &(i, j) in basis {
            match (u[i].is_nan(), v[j].is_nan()) {
                (false, true) => v[j] = cost[[i, j]] - u[i],
                (true, false) => u[i] = cost[[i, j]] - v[j],
                (true, true) => remaining += 1,
                (false, false) => {}
            }
        }
    }
    (u, v)
}

/// Basis cells on the tree path from column node `col` to row node `row`.
fn tree_path(m: usize, r: usize, basis: &[(usize, usize)], row: usize, col: usize) -> Vec<(usize, usize)> {
    // nodes: rows 0..m, columns m..m+r
    let mut adj = vec![Vec::new(); m + r];
    for &(i, j) in basis {
        adj[i].push(m + j);
        adj[m + j].push(i);
    }
    let start = m + col;
    let mut parent = vec![usize::MAX; m + r];
    parent[start] = start;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == row {
            break;
        }
        for &next in &adj[node] {
            if parent[next] == usize::MAX {
                parent[next] = node;
                queue.push_back(next);
            }
        }
    }
    // walk back from row to start, then reverse so the path begins at the column
    let mut cells = Vec::new();
    let mut node = row;
    while node != start {
        let p = parent[node];
        let cell = if node < m { (node, p - m) } else { (p, node - m) };
        cells.push(cell);
        node = p;
    }
    cells.reverse();
    cells
}

/// Exhaustive search over basic feasible solutions (spanning-tree bases).
pub fn vertex_enumeration_ot(c: &CostMatrix, a: &[f64], b: &[f64]) -> Result<TransportPlan> {
    check_problem(c, a, b, ENUMERATION_MAX_CELLS)?;
    let (m, r) = (c.rows(), c.cols());
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..r).map(move |j| (i, j))).collect();
    let k = m + r - 1;
    let mut best: Option<(f64, Mat)> = None;
    let mut chosen = Vec::with_capacity(k);
    enumerate_subsets(&cells, k, 0, &mut chosen, &mut |subset| {
        if let Some(x) = basic_solution(m, r, subset, a, b) {
            let cost = (&x * &c.values).sum();
            if best.as_ref().is_none_or(|(bc, _)| cost < *bc) {
                best = Some((cost, x));
            }
        }
    });
    let (_, values) = best.ok_or_else(|| Error::Numerical("no feasible vertex found".into()))?;
    Ok(TransportPlan {
        values,
        row_marginal: a.to_vec(),
        col_marginal: b.to_vec(),
    })
}

type Cell = (usize, usize);

fn enumerate_subsets(
    cells: &[Cell],
    k: usize,
    from: usize,
    chosen: &mut Vec<Cell>,
    visit: &mut dyn FnMut(&[Cell]),
) {
    if chosen.len() == k {
        visit(chosen);
        return;
    }
    let need = k - chosen.len();
    for idx in from..=cells.len() - need {
        chosen.push(cells[idx]);
        enumerate_subsets(cells, k, idx + 1, chosen, visit);
        chosen.pop();
    }
}

/// The unique flow supported on a spanning-tree basis, if the subset is a tree
/// and the flow is nonnegative.
fn basic_solution(m: usize, r: usize, subset: &[(usize, usize)], a: &[f64], b: &[f64]) -> Option<Mat> {
    let mut degree = vec![0usize; m + r];
    let mut alive = vec![true; subset.len()];
    let mut supply: Vec<f64> = a.iter().chain(b).copied().collect();
    for &(i, j) in subset {
        degree[i] += 1;
        degree[m + j] += 1;
    }
    if degree.contains(&0) {
        return None;
    }
    let mut x = Mat::zeros((m, r));
    for _ in 0..subset.len() {
        // an edge with a leaf endpoint
        let (e, leaf) = subset.iter().enumerate().filter(|&(e, _)| alive[e]).find_map(|(e, &(i, j))| {
            if degree[i] == 1 {
                Some((e, i))
            } else if degree[m + j] == 1 {
                Some((e, m + j))
            } else {
                None
            }
        })?;
        let (i, j) = subset[e];
        let other = if leaf == i { m + j } else { i };
        let flow = supply[leaf];
        x[[i, j]] = flow;
        supply[other] -= flow;
        supply[leaf] = 0.0;
        alive[e] = false;
        degree[i] -= 1;
        degree[m + j] -= 1;
    }
    // every node must be balanced, otherwise the subset contained a cycle
    if supply.iter().any(|s| s.abs() > 1e-9) || x.iter().any(|&v| v < -1e-12) {
        return None;
    }
    Some(x.mapv(|v| v.max(0.0)))
}
