use super::{uniform, CostMatrix, IpotConfig, TransportPlan};
use crate::autograd::Mat;
use crate::error::{Error, Result};

/// Inexact proximal point iteration with uniform marginals.
///
/// Each outer step forms `Q = exp(-C/β) ⊙ T` and runs Sinkhorn scaling on `Q`
/// with the column scaling carried across steps. The final plan is rounded
/// onto the marginals so they hold to floating-point precision.
pub fn ipot_solve(c: &CostMatrix, cfg: &IpotConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (m, r) = (c.rows(), c.cols());
    let a = uniform(m);
    let b = uniform(r);
    let kernel = c.values.mapv(|v| (-v / cfg.beta).exp());
    let dead_row = kernel.rows().into_iter().any(|row| !(row.sum() > 0.0 && row.sum().is_finite()));
    let dead_col = kernel
        .columns()
        .into_iter()
        .any(|col| !(col.sum() > 0.0 && col.sum().is_finite()));
    if dead_row || dead_col {
        return Err(Error::Numerical(format!(
            "transport kernel exp(-C/beta) vanishes for beta = {}; raise beta",
            cfg.beta
        )));
    }

    let mut t = Mat::from_shape_fn((m, r), |(i, j)| a[i] * b[j]);
    let mut sigma = vec![1.0 / r as f64; r];
    let mut delta = vec![0.0; m];
    for _ in 0..cfg.outer_iters {
        let q = &kernel * &t;
        for _ in 0..cfg.inner_sinkhorn_iters {
            let qs = q.dot(&ndarray::Array1::from(sigma.clone()));
            for i in 0..m {
                delta[i] = a[i] / qs[i];
            }
            let qd = q.t().dot(&ndarray::Array1::from(delta.clone()));
            for j in 0..r {
                sigma[j] = b[j] / qd[j];
            }
        }
        let next = Mat::from_shape_fn((m, r), |(i, j)| delta[i] * q[[i, j]] * sigma[j]);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "transport iteration diverged for beta = {}; raise beta",
                cfg.beta
            )));
        }
        let change = (&next - &t).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        t = next;
        if change < cfg.convergence_tol {
            break;
        }
    }
    Ok(round_to_marginals(t, a, b))
}

/// Projects a nonnegative matrix onto the transport polytope: scale rows and
/// columns down to at most their marginals, then add the rank-one correction.
fn round_to_marginals(mut t: Mat, a: Vec<f64>, b: Vec<f64>) -> TransportPlan {
    for (mut row, &ai) in t.rows_mut().into_iter().zip(&a) {
        let s = row.sum();
        if s > ai {
            row *= ai / s;
        }
    }
    for (mut col, &bj) in t.columns_mut().into_iter().zip(&b) {
        let s = col.sum();
        if s > bj {
            col *= bj / s;
        }
    }
    let err_r: Vec<f64> = t.rows().into_iter().zip(&a).map(|(row, &ai)| (ai - row.sum()).max(0.0)).collect();
    let err_c: Vec<f64> = t
        .columns()
        .into_iter()
        .zip(&b)
        .map(|(col, &bj)| (bj - col.sum()).max(0.0))
        .collect();
    let total: f64 = err_c.iter().sum();
    if total > 0.0 {
        for ((i, j), v) in t.indexed_iter_mut() {
            *v += err_r[i] * err_c[j] / total;
        }
    }
    TransportPlan {
        values: t,
        row_marginal: a,
        col_marginal: b,
    }
}
