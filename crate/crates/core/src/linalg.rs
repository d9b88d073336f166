//! Small least-squares helpers shared by the projection and reference
//! fitters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a column is treated as linearly
/// dependent and dropped.
const PIVOT_TOL: f64 = 1e-10;

/// Solves `gram * x = rhs` for a symmetric PSD gram matrix. Falls back
/// to a rank-revealing pivoted Cholesky when the plain factorization
/// fails; dropped columns get zero coefficients.
pub fn gram_solve(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = gram.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    pivoted_gram_solve(gram, rhs)
}

/// Rank-revealing pivoted Cholesky solve. Selects pivots greedily by
/// largest remaining diagonal, drops columns whose pivot falls below
/// PIVOT_TOL relative to the largest initial diagonal, and returns a
/// solution with zeros on dropped columns.
pub fn pivoted_gram_solve(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let m = gram.nrows();
    let mut diag: Vec<f64> = (0..m).map(|j| gram[(j, j)]).collect();
    let max0 = diag.iter().cloned().fold(0.0_f64, f64::max);
    if max0 <= 0.0 {
        return Err(Error::SingularDesign("gram matrix has no positive diagonal".into()));
    }
    let tol = PIVOT_TOL * max0;
    let mut factors = DMatrix::<f64>::zeros(m, m);
    let mut selected: Vec<usize> = Vec::new();
    let mut is_selected = vec![false; m];
    for t in 0..m {
        let mut pivot = tol;
        let mut pivot_idx = None;
        for j in 0..m {
            if !is_selected[j] && diag[j] > pivot {
                pivot = diag[j];
                pivot_idx = Some(j);
            }
        }
        let Some(jp) = pivot_idx else { break };
        let l_tt = pivot.sqrt();
        factors[(jp, t)] = l_tt;
        for j in 0..m {
            if is_selected[j] || j == jp {
                continue;
            }
            let mut val = gram[(j, jp)];
            for u in 0..t {
                val -= factors[(j, u)] * factors[(jp, u)];
            }
            let l_jt = val / l_tt;
            factors[(j, t)] = l_jt;
            diag[j] -= l_jt * l_jt;
        }
        is_selected[jp] = true;
        selected.push(jp);
    }
    let rank = selected.len();
    if rank == 0 {
        return Err(Error::SingularDesign("gram matrix is numerically zero".into()));
    }
    // forward solve L z = rhs_S, backward solve L^T w = z
    let mut z = vec![0.0; rank];
    for t in 0..rank {
        let mut v = rhs[selected[t]];
        for u in 0..t {
            v -= factors[(selected[t], u)] * z[u];
        }
        z[t] = v / factors[(selected[t], t)];
    }
    let mut w = vec![0.0; rank];
    for t in (0..rank).rev() {
        let mut v = z[t];
        for u in (t + 1)..rank {
            v -= factors[(selected[u], t)] * w[u];
        }
        w[t] = v / factors[(selected[t], t)];
    }
    let mut x = DVector::zeros(m);
    for (t, &j) in selected.iter().enumerate() {
        x[j] = w[t];
    }
    Ok(x)
}

/// Ordinary least squares of `target` on `design`.
pub fn least_squares(design: &DMatrix<f64>, target: &DVector<f64>) -> Result<DVector<f64>> {
    let gram = design.transpose() * design;
    let rhs = design.transpose() * target;
    gram_solve(&gram, &rhs)
}

/// Weighted least squares with per-observation weights.
pub fn weighted_least_squares(
    design: &DMatrix<f64>,
    weights: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = design.nrows();
    let m = design.ncols();
    let mut gram = DMatrix::zeros(m, m);
    let mut rhs = DVector::zeros(m);
    for i in 0..n {
        let wi = weights[i];
        if wi == 0.0 {
            continue;
        }
        let row = design.row(i);
        for a in 0..m {
            rhs[a] += wi * row[a] * target[i];
            for b in a..m {
                gram[(a, b)] += wi * row[a] * row[b];
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    gram_solve(&gram, &rhs)
}
