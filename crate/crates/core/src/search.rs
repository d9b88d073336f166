//! Solution-path search: greedy forward search minimizing projection KL
//! and an L1 (lasso-path) search on the single-point reference fit.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Family, Submodel};
use crate::projection::{project_clustered, project_single, GramProjector, ProjectedPosterior};
use crate::reference::ClusteredDraws;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMethod {
    Forward,
    L1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub method: SearchMethod,
    /// Early-stopping size, <= p.
    pub p_max: usize,
    pub clusters_c: usize,
    /// Number of lambda grid points (L1 only).
    pub lambda_grid_size: usize,
    pub seed: u64,
    /// Predictors forced to the front of the order, in the given order.
    #[serde(default)]
    pub forced: Vec<usize>,
}

impl SearchConfig {
    pub fn forward(p_max: usize, clusters_c: usize, seed: u64) -> SearchConfig {
        SearchConfig {
            method: SearchMethod::Forward,
            p_max,
            clusters_c,
            lambda_grid_size: 100,
            seed,
            forced: Vec::new(),
        }
    }

    pub fn l1(p_max: usize, seed: u64) -> SearchConfig {
        SearchConfig {
            method: SearchMethod::L1,
            p_max,
            clusters_c: 1,
            lambda_grid_size: 100,
            seed,
            forced: Vec::new(),
        }
    }

    fn validate(&self, p: usize) -> Result<()> {
        if self.p_max == 0 || self.p_max > p {
            return Err(Error::InvalidArgument(format!(
                "p_max {} out of range 1..={p}",
                self.p_max
            )));
        }
        if self.clusters_c == 0 {
            return Err(Error::InvalidArgument("clusters_c must be >= 1".into()));
        }
        for &j in &self.forced {
            if j >= p {
                return Err(Error::InvalidArgument(format!("forced index {j} out of range")));
            }
        }
        Ok(())
    }
}

/// Nested predictor ordering with per-size projection KL.
#[derive(Debug, Clone)]
pub struct SolutionPath {
    /// Predictor indices in entry order, length p_max.
    pub order: Vec<usize>,
    /// Index 0 is the intercept-only model.
    pub kl_at_size: Vec<f64>,
    pub method: SearchMethod,
    /// Per-size projections of the chosen prefixes (search-resolution).
    pub projections: Vec<ProjectedPosterior>,
    /// Number of KL projections performed during the search.
    pub projection_count: usize,
}

impl SolutionPath {
    pub fn prefix(&self, size: usize, p: usize) -> Result<Submodel> {
        if size > self.order.len() {
            return Err(Error::InvalidArgument(format!(
                "prefix size {size} exceeds path length {}",
                self.order.len()
            )));
        }
        Submodel::new(self.order[..size].to_vec(), p)
    }
}

/// Greedy forward search: at each size, adds the candidate whose
/// clustered projection has the smallest KL; ties break to the lowest
/// predictor index.
pub fn forward_search(
    dataset: &Dataset,
    clusters: &ClusteredDraws,
    config: &SearchConfig,
) -> Result<SolutionPath> {
    let p = dataset.p();
    config.validate(p)?;
    let gram = match dataset.family {
        Family::Gaussian => Some(GramProjector::new(dataset, clusters)?),
        _ => None,
    };
    let mut count = 0usize;
    let mut order: Vec<usize> = Vec::new();
    let mut kl_at_size = Vec::new();
    let mut projections = Vec::new();

    let project_prefix = |indices: &[usize], count: &mut usize| -> Result<(f64, ProjectedPosterior)> {
        *count += 1;
        let sub = Submodel::new(indices.to_vec(), p)?;
        let projected = project_clustered(dataset, &sub, clusters)?;
        Ok((projected.kl_total, projected))
    };

    // intercept-only baseline
    let (kl0, proj0) = project_prefix(&[], &mut count)?;
    kl_at_size.push(kl0);
    projections.push(proj0);

    // forced predictors enter first, in the given order
    for &j in &config.forced {
        order.push(j);
        let (kl, proj) = project_prefix(&order, &mut count)?;
        kl_at_size.push(kl);
        projections.push(proj);
    }

    while order.len() < config.p_max {
        let candidates: Vec<usize> = (0..p).filter(|j| !order.contains(j)).collect();
        let results: Vec<(usize, Result<f64>)> = candidates
            .par_iter()
            .map(|&j| {
                let mut indices = order.clone();
                indices.push(j);
                let kl = match &gram {
                    Some(gp) => gp.kl_total(&indices),
                    None => Submodel::new(indices.clone(), p)
                        .and_then(|sub| project_clustered(dataset, &sub, clusters))
                        .map(|proj| proj.kl_total),
                };
                (j, kl)
            })
            .collect();
        count += candidates.len();
        let mut best: Option<(usize, f64)> = None;
        let mut failures = 0usize;
        for (j, kl) in results {
            match kl {
                Ok(kl) => {
                    if best.map_or(true, |(_, b)| kl < b) {
                        best = Some((j, kl));
                    }
                }
                Err(e) => {
                    failures += 1;
                    log::warn!("candidate {j} skipped at size {}: {e}", order.len() + 1);
                }
            }
        }
        let Some((chosen, _)) = best else {
            return Err(Error::SearchFailure {
                size: order.len() + 1,
                reason: format!("all {failures} candidate projections failed"),
            });
        };
        order.push(chosen);
        // re-project the chosen prefix to store its handle; counted as
        // part of the candidate evaluation above, not an extra one
        let sub = Submodel::new(order.clone(), p)?;
        let projected = project_clustered(dataset, &sub, clusters)?;
        kl_at_size.push(projected.kl_total);
        projections.push(projected);
    }
    Ok(SolutionPath {
        order,
        kl_at_size,
        method: SearchMethod::Forward,
        projections,
        projection_count: count,
    })
}

/// Coordinate-descent lasso path on standardized predictors; returns
/// the entry order over a descending log-spaced lambda grid.
struct LassoPath {
    entry_order: Vec<usize>,
    final_coefficients: DVector<f64>,
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Weighted coordinate descent for
///   (1/2n) sum_i w_i (z_i - b0 - x_i beta)^2 + lambda ||beta||_1
/// on standardized columns; b0 unpenalized.
#[allow(clippy::too_many_arguments)]
fn coordinate_descent(
    x: &DMatrix<f64>,
    z: &DVector<f64>,
    w: &DVector<f64>,
    lambda: f64,
    beta: &mut DVector<f64>,
    b0: &mut f64,
    max_iter: usize,
    tol: f64,
) {
    let n = x.nrows();
    let p = x.ncols();
    let nf = n as f64;
    let mut residual = DVector::zeros(n);
    for i in 0..n {
        let mut fit = *b0;
        for j in 0..p {
            fit += x[(i, j)] * beta[j];
        }
        residual[i] = z[i] - fit;
    }
    let w_sum: f64 = w.sum();
    let col_wsq: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| w[i] * x[(i, j)] * x[(i, j)]).sum::<f64>() / nf)
        .collect();
    for _iter in 0..max_iter {
        let mut max_delta: f64 = 0.0;
        // intercept
        let grad0: f64 = (0..n).map(|i| w[i] * residual[i]).sum::<f64>() / nf;
        let new_b0 = *b0 + grad0 / (w_sum / nf);
        let d0 = new_b0 - *b0;
        if d0 != 0.0 {
            for i in 0..n {
                residual[i] -= d0;
            }
            *b0 = new_b0;
            max_delta = max_delta.max(d0.abs());
        }
        for j in 0..p {
            if col_wsq[j] <= 0.0 {
                continue;
            }
            let rho: f64 = (0..n)
                .map(|i| w[i] * x[(i, j)] * residual[i])
                .sum::<f64>()
                / nf
                + col_wsq[j] * beta[j];
            let new = soft_threshold(rho, lambda) / col_wsq[j];
            let d = new - beta[j];
            if d != 0.0 {
                for i in 0..n {
                    residual[i] -= d * x[(i, j)];
                }
                beta[j] = new;
                max_delta = max_delta.max(d.abs());
            }
        }
        if max_delta < tol {
            break;
        }
    }
}

fn lasso_entry_order(
    dataset: &Dataset,
    target: &DVector<f64>,
    grid_size: usize,
) -> Result<LassoPath> {
    let n = dataset.n();
    let p = dataset.p();
    let nf = n as f64;
    // standardize columns for the penalty
    let mut xs = DMatrix::zeros(n, p);
    for j in 0..p {
        let col = dataset.x.column(j);
        let mean = col.sum() / nf;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for i in 0..n {
            xs[(i, j)] = (dataset.x[(i, j)] - mean) / sd;
        }
    }
    let gaussian = dataset.family == Family::Gaussian;
    // lambda_max: smallest lambda with an all-zero solution, computed at
    // the null (intercept-only) fit
    let null_mu = match dataset.family {
        Family::Gaussian => DVector::from_element(n, target.sum() / nf),
        _ => {
            let sub = Submodel::empty();
            let (coef, _, _) = project_single(dataset, &sub, target, gaussian.then_some(1.0))?;
            crate::model::mean_from_eta(
                dataset.family,
                &DVector::from_element(n, coef[0]),
            )
        }
    };
    let mut lambda_max: f64 = 0.0;
    for j in 0..p {
        let g: f64 = (0..n).map(|i| xs[(i, j)] * (target[i] - null_mu[i])).sum::<f64>() / nf;
        lambda_max = lambda_max.max(g.abs());
    }
    if lambda_max <= 0.0 {
        // constant target; no predictor ever enters
        return Ok(LassoPath { entry_order: Vec::new(), final_coefficients: DVector::zeros(p) });
    }
    let grid_size = grid_size.max(2);
    let lambdas: Vec<f64> = (0..grid_size)
        .map(|g| {
            let f = g as f64 / (grid_size - 1) as f64;
            lambda_max * (1e-3f64.powf(f))
        })
        .collect();
    let mut beta = DVector::zeros(p);
    let mut b0 = if gaussian { target.sum() / nf } else { 0.0 };
    let mut entry_order: Vec<usize> = Vec::new();
    for &lambda in &lambdas {
        if gaussian {
            coordinate_descent(&xs, target, &DVector::from_element(n, 1.0), lambda, &mut beta, &mut b0, 200, 1e-7);
        } else {
            // penalized IRLS: quadratic approximation around the current
            // coefficients, then weighted coordinate descent
            for _outer in 0..25 {
                let mut eta = DVector::from_element(n, b0);
                for j in 0..p {
                    if beta[j] != 0.0 {
                        for i in 0..n {
                            eta[i] += xs[(i, j)] * beta[j];
                        }
                    }
                }
                let mu = crate::model::mean_from_eta(dataset.family, &eta);
                let mut w = DVector::zeros(n);
                let mut z = DVector::zeros(n);
                for i in 0..n {
                    let wi = match dataset.family {
                        Family::Bernoulli => (mu[i] * (1.0 - mu[i])).max(1e-6),
                        Family::Poisson => mu[i].max(1e-6),
                        Family::Gaussian => 1.0,
                    };
                    w[i] = wi;
                    z[i] = eta[i] + (target[i] - mu[i]) / wi;
                }
                let before = beta.clone();
                coordinate_descent(&xs, &z, &w, lambda, &mut beta, &mut b0, 100, 1e-7);
                if (&beta - &before).amax() < 1e-7 {
                    break;
                }
            }
        }
        for j in 0..p {
            if beta[j] != 0.0 && !entry_order.contains(&j) {
                entry_order.push(j);
            }
        }
    }
    Ok(LassoPath { entry_order, final_coefficients: beta })
}

/// L1 search on the single-point (C = 1) reference fit. The predictor
/// order is the lasso entry order; predictors never entering are
/// appended by |coefficient| at the smallest lambda. KL per size is
/// recomputed by unpenalized re-projection of each prefix.
pub fn l1_search(
    dataset: &Dataset,
    single_point_mu: &DVector<f64>,
    single_point_dispersion: Option<f64>,
    config: &SearchConfig,
) -> Result<SolutionPath> {
    let p = dataset.p();
    config.validate(p)?;
    let path = lasso_entry_order(dataset, single_point_mu, config.lambda_grid_size)?;
    let mut order: Vec<usize> = config.forced.clone();
    for &j in &path.entry_order {
        if !order.contains(&j) {
            order.push(j);
        }
    }
    if order.len() < config.p_max {
        // documented fallback: append by |coefficient| at smallest lambda
        let mut rest: Vec<usize> = (0..p).filter(|j| !order.contains(j)).collect();
        rest.sort_by(|&a, &b| {
            path.final_coefficients[b]
                .abs()
                .partial_cmp(&path.final_coefficients[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        order.extend(rest);
    }
    order.truncate(config.p_max);

    let mut kl_at_size = Vec::with_capacity(config.p_max + 1);
    let mut projections = Vec::with_capacity(config.p_max + 1);
    let mut count = 0usize;
    for size in 0..=order.len() {
        let sub = Submodel::new(order[..size].to_vec(), p)?;
        let (coef, sigma, kl) =
            project_single(dataset, &sub, single_point_mu, single_point_dispersion)?;
        count += 1;
        kl_at_size.push(kl);
        let mut coefficients = DMatrix::zeros(1, size + 1);
        for j in 0..=size {
            coefficients[(0, j)] = coef[j];
        }
        projections.push(ProjectedPosterior {
            submodel: sub,
            coefficients,
            dispersion: sigma.map(|s| DVector::from_element(1, s)),
            weights: DVector::from_element(1, 1.0),
            kl_total: kl,
        });
    }
    Ok(SolutionPath {
        order,
        kl_at_size,
        method: SearchMethod::L1,
        projections,
        projection_count: count,
    })
}

/// Per-size KL summary along a path; the paper warns that KL elbows are
/// usually soft, so no automated elbow selection is attempted.
#[derive(Debug, Clone, Serialize)]
pub struct PathDiagnostics {
    pub kl_at_size: Vec<f64>,
    /// Finite differences kl[k-1] - kl[k] (the drop when adding the
    /// k-th predictor).
    pub kl_drops: Vec<f64>,
    /// KL at the largest size is ~0: the path saturates the reference.
    pub full_size_kl_negligible: bool,
}

pub fn path_diagnostics(path: &SolutionPath) -> PathDiagnostics {
    let kl = &path.kl_at_size;
    let drops = kl.windows(2).map(|w| w[0] - w[1]).collect();
    let scale = kl.first().cloned().unwrap_or(0.0).abs().max(1.0);
    PathDiagnostics {
        kl_at_size: kl.clone(),
        kl_drops: drops,
        full_size_kl_negligible: kl.last().map_or(false, |&v| v < 1e-6 * scale),
    }
}

/// Entry (j, k) = fraction of paths whose first k+1 entries contain
/// predictor j; rows are non-decreasing across sizes.
pub fn cumulative_inclusion_rates(paths: &[SolutionPath], p: usize) -> Result<DMatrix<f64>> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let p_max = paths.iter().map(|path| path.order.len()).min().unwrap();
    let mut rates = DMatrix::zeros(p, p_max);
    for path in paths {
        for (pos, &j) in path.order.iter().take(p_max).enumerate() {
            for k in pos..p_max {
                rates[(j, k)] += 1.0;
            }
        }
    }
    rates /= paths.len() as f64;
    Ok(rates)
}
