//! KL-minimizing projection of reference draws or clusters onto a
//! submodel, including the Gaussian dispersion projection.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{gram_solve, least_squares, pivoted_gram_solve, weighted_least_squares};
use crate::model::{
    log_density, log_sum_exp, mean_from_eta, mean_from_eta_scalar, Dataset, Family, Submodel,
    ETA_CLAMP, MEAN_EPS,
};
use crate::model::PosteriorDraws;
use crate::reference::{reference_fitted_means, ClusteredDraws};

const IRLS_MAX_ITER: usize = 100;
const IRLS_TOL: f64 = 1e-8;

/// Projected posterior: one coefficient vector (and dispersion) per
/// draw or cluster, with mixture weights.
#[derive(Debug, Clone)]
pub struct ProjectedPosterior {
    pub submodel: Submodel,
    /// C x (k+1).
    pub coefficients: DMatrix<f64>,
    pub dispersion: Option<DVector<f64>>,
    pub weights: DVector<f64>,
    /// Weighted mean over draws/clusters of the per-draw KL sums.
    pub kl_total: f64,
}

impl ProjectedPosterior {
    pub fn n_components(&self) -> usize {
        self.coefficients.nrows()
    }

    /// Component-wise fitted means on a dataset: C x n.
    pub fn component_means(&self, dataset: &Dataset) -> DMatrix<f64> {
        let c = self.n_components();
        let n = dataset.n();
        let mut out = DMatrix::zeros(c, n);
        for comp in 0..c {
            let mut eta = DVector::from_element(n, self.coefficients[(comp, 0)]);
            for (slot, &j) in self.submodel.indices().iter().enumerate() {
                let coef = self.coefficients[(comp, slot + 1)];
                if coef != 0.0 {
                    eta.axpy(coef, &dataset.x.column(j).clone_owned(), 1.0);
                }
            }
            out.set_row(comp, &mean_from_eta(dataset.family, &eta).transpose());
        }
        out
    }

    /// C x n matrix of per-component log densities of the observed
    /// responses.
    pub fn component_log_densities(&self, dataset: &Dataset) -> Result<DMatrix<f64>> {
        let means = self.component_means(dataset);
        let c = self.n_components();
        let n = dataset.n();
        let mut out = DMatrix::zeros(c, n);
        for comp in 0..c {
            let sigma = self.dispersion.as_ref().map(|d| d[comp]);
            for i in 0..n {
                out[(comp, i)] =
                    log_density(dataset.family, dataset.y[i], means[(comp, i)], sigma)?;
            }
        }
        Ok(out)
    }
}

/// Per-observation KL divergence from the reference distribution (mean
/// `ref_mu`, dispersion `ref_sigma`) to the submodel distribution.
fn observation_kl(
    family: Family,
    ref_mu: f64,
    ref_sigma: Option<f64>,
    fit_mu: f64,
    fit_sigma: Option<f64>,
) -> f64 {
    match family {
        Family::Gaussian => {
            let s1 = ref_sigma.expect("Gaussian reference dispersion");
            let s2 = fit_sigma.expect("Gaussian submodel dispersion");
            (s2 / s1).ln() + (s1 * s1 + (ref_mu - fit_mu).powi(2)) / (2.0 * s2 * s2) - 0.5
        }
        Family::Bernoulli => {
            let p = ref_mu.clamp(MEAN_EPS, 1.0 - MEAN_EPS);
            let q = fit_mu.clamp(MEAN_EPS, 1.0 - MEAN_EPS);
            p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
        }
        Family::Poisson => {
            let l1 = ref_mu.max(MEAN_EPS);
            let l2 = fit_mu.max(MEAN_EPS);
            l1 * (l1 / l2).ln() - l1 + l2
        }
    }
}

/// Single-point projection: fits the submodel to one reference mean
/// vector, returning coefficients, the projected dispersion (Gaussian),
/// and the achieved KL sum.
pub fn project_single(
    dataset: &Dataset,
    submodel: &Submodel,
    ref_mu: &DVector<f64>,
    ref_dispersion: Option<f64>,
) -> Result<(DVector<f64>, Option<f64>, f64)> {
    let n = dataset.n();
    if ref_mu.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "reference mean has {} entries for {} observations",
            ref_mu.len(),
            n
        )));
    }
    let design = submodel.design(dataset);
    match dataset.family {
        Family::Gaussian => {
            let sigma_ref = ref_dispersion.ok_or_else(|| {
                Error::InvalidArgument("Gaussian projection requires a reference dispersion".into())
            })?;
            let coef = least_squares(&design, ref_mu)?;
            let fit = &design * &coef;
            let discrepancy = (ref_mu - &fit).norm_squared() / n as f64;
            let sigma_sub = (sigma_ref * sigma_ref + discrepancy).sqrt();
            let mut kl = 0.0;
            for i in 0..n {
                kl += observation_kl(
                    Family::Gaussian,
                    ref_mu[i],
                    Some(sigma_ref),
                    fit[i],
                    Some(sigma_sub),
                );
            }
            Ok((coef, Some(sigma_sub), kl))
        }
        Family::Bernoulli | Family::Poisson => {
            let coef = irls_fit(dataset.family, &design, ref_mu)?;
            let fit = mean_from_eta(dataset.family, &(&design * &coef));
            let mut kl = 0.0;
            for i in 0..n {
                kl += observation_kl(dataset.family, ref_mu[i], None, fit[i], None);
            }
            Ok((coef, None, kl))
        }
    }
}

/// IRLS for the canonical GLM with (possibly non-integer) pseudo
/// responses; starts at zero, damps with step-halving, and converges
/// when max |delta coef| < 1e-8.
fn irls_fit(family: Family, design: &DMatrix<f64>, target: &DVector<f64>) -> Result<DVector<f64>> {
    let n = design.nrows();
    let m = design.ncols();
    let mut coef = DVector::zeros(m);
    let mut eta = DVector::zeros(n);
    let mut objective = expected_log_lik(family, target, &eta);
    let mut last_delta = f64::INFINITY;
    for _iter in 0..IRLS_MAX_ITER {
        let mu = mean_from_eta(family, &eta);
        let mut weights = DVector::zeros(n);
        let mut z = DVector::zeros(n);
        for i in 0..n {
            let w = match family {
                Family::Bernoulli => (mu[i] * (1.0 - mu[i])).max(1e-10),
                Family::Poisson => mu[i].max(1e-10),
                Family::Gaussian => 1.0,
            };
            weights[i] = w;
            z[i] = eta[i] + (target[i] - mu[i]) / w;
        }
        let proposal = weighted_least_squares(design, &weights, &z)?;
        // step-halving toward the previous iterate if the expected
        // log-likelihood does not improve
        let mut step = 1.0;
        let mut accepted = false;
        for _half in 0..30 {
            let candidate = &coef * (1.0 - step) + &proposal * step;
            let cand_eta = design * &candidate;
            if cand_eta.iter().all(|e| e.abs() <= 4.0 * ETA_CLAMP) {
                let cand_obj = expected_log_lik(family, target, &cand_eta);
                if cand_obj.is_finite() && cand_obj >= objective - 1e-14 {
                    last_delta = (&candidate - &coef).amax();
                    coef = candidate;
                    eta = cand_eta;
                    objective = cand_obj;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::IrlsNonConvergence { iterations: IRLS_MAX_ITER, last_delta });
        }
        if last_delta < IRLS_TOL {
            return Ok(coef);
        }
    }
    Err(Error::IrlsNonConvergence { iterations: IRLS_MAX_ITER, last_delta })
}

fn expected_log_lik(family: Family, target: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..target.len() {
        let e = eta[i];
        acc += match family {
            Family::Bernoulli => {
                // t*eta - log(1 + exp(eta)), stable form
                target[i] * e - if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() }
            }
            Family::Poisson => target[i] * e - e.clamp(-ETA_CLAMP, ETA_CLAMP).exp(),
            Family::Gaussian => -(target[i] - e).powi(2),
        };
    }
    acc
}

/// Draw-by-draw projection: one single-point projection per posterior
/// draw on its fitted mean, concatenated with the draw weights.
pub fn project_drawwise(
    dataset: &Dataset,
    submodel: &Submodel,
    draws: &PosteriorDraws,
) -> Result<ProjectedPosterior> {
    let mus = reference_fitted_means(draws, dataset);
    let s = draws.n_draws();
    if dataset.family == Family::Gaussian {
        // all draws share the design, so the Gram factorization is
        // computed once; per-draw arithmetic matches project_single
        // exactly (same gram, same rhs expression, same solve)
        let sigmas = draws.dispersion.as_ref().ok_or_else(|| {
            Error::InvalidArgument("Gaussian projection requires a reference dispersion".into())
        })?;
        let design = submodel.design(dataset);
        let gram = design.transpose() * &design;
        let chol = gram.clone().cholesky();
        let n = dataset.n();
        let results: Vec<Result<(DVector<f64>, Option<f64>, f64)>> = (0..s)
            .into_par_iter()
            .map(|draw| {
                let ref_mu = mus.row(draw).transpose();
                let rhs = design.transpose() * &ref_mu;
                let coef = match &chol {
                    Some(c) => c.solve(&rhs),
                    None => pivoted_gram_solve(&gram, &rhs)
                        .map_err(|e| Error::DrawProjection { draw, source: Box::new(e) })?,
                };
                let fit = &design * &coef;
                let sigma_ref = sigmas[draw];
                let discrepancy = (&ref_mu - &fit).norm_squared() / n as f64;
                let sigma_sub = (sigma_ref * sigma_ref + discrepancy).sqrt();
                let mut kl = 0.0;
                for i in 0..n {
                    kl += observation_kl(
                        Family::Gaussian,
                        ref_mu[i],
                        Some(sigma_ref),
                        fit[i],
                        Some(sigma_sub),
                    );
                }
                Ok((coef, Some(sigma_sub), kl))
            })
            .collect();
        return assemble(dataset, submodel, results, &draws.draw_weights);
    }
    let results: Vec<_> = (0..s)
        .into_par_iter()
        .map(|draw| {
            let ref_mu = mus.row(draw).transpose();
            let sigma = draws.dispersion.as_ref().map(|d| d[draw]);
            project_single(dataset, submodel, &ref_mu, sigma).map_err(|e| {
                Error::DrawProjection { draw, source: Box::new(e) }
            })
        })
        .collect();
    assemble(dataset, submodel, results, &draws.draw_weights)
}

/// Clustered projection: one single-point projection per cluster on its
/// average fitted mean; weights are copied from the clusters.
pub fn project_clustered(
    dataset: &Dataset,
    submodel: &Submodel,
    clusters: &ClusteredDraws,
) -> Result<ProjectedPosterior> {
    let c = clusters.n_clusters();
    let results: Vec<_> = (0..c)
        .into_par_iter()
        .map(|cluster| {
            let ref_mu = clusters.fitted_means.row(cluster).transpose();
            let sigma = clusters.dispersion.as_ref().map(|d| d[cluster]);
            project_single(dataset, submodel, &ref_mu, sigma).map_err(|e| {
                Error::DrawProjection { draw: cluster, source: Box::new(e) }
            })
        })
        .collect();
    assemble(dataset, submodel, results, &clusters.weights)
}

fn assemble(
    _dataset: &Dataset,
    submodel: &Submodel,
    results: Vec<Result<(DVector<f64>, Option<f64>, f64)>>,
    weights: &DVector<f64>,
) -> Result<ProjectedPosterior> {
    let c = results.len();
    let k1 = submodel.size() + 1;
    let mut coefficients = DMatrix::zeros(c, k1);
    let mut dispersion: Option<DVector<f64>> = None;
    let mut kl_total = 0.0;
    for (row, result) in results.into_iter().enumerate() {
        let (coef, sigma, kl) = result?;
        for j in 0..k1 {
            coefficients[(row, j)] = coef[j];
        }
        if let Some(s) = sigma {
            dispersion.get_or_insert_with(|| DVector::zeros(c))[row] = s;
        }
        kl_total += weights[row] * kl;
    }
    Ok(ProjectedPosterior {
        submodel: submodel.clone(),
        coefficients,
        dispersion,
        weights: weights.clone(),
        kl_total,
    })
}

/// log of the mixture predictive density of observation i under the
/// projected posterior, with log-sum-exp stability.
pub fn predictive_log_density(
    projected: &ProjectedPosterior,
    dataset: &Dataset,
    i: usize,
) -> Result<f64> {
    if i >= dataset.n() {
        return Err(Error::InvalidArgument(format!("observation index {i} out of range")));
    }
    let c = projected.n_components();
    let mut terms = Vec::with_capacity(c);
    for comp in 0..c {
        let mut eta = projected.coefficients[(comp, 0)];
        for (slot, &j) in projected.submodel.indices().iter().enumerate() {
            eta += projected.coefficients[(comp, slot + 1)] * dataset.x[(i, j)];
        }
        let mu = mean_from_eta_scalar(dataset.family, eta);
        let sigma = projected.dispersion.as_ref().map(|d| d[comp]);
        let ld = log_density(dataset.family, dataset.y[i], mu, sigma)?;
        terms.push(projected.weights[comp].ln() + ld);
    }
    Ok(log_sum_exp(&terms))
}

/// Precomputed cross-products for fast repeated Gaussian projections of
/// different predictor subsets against the same clustered reference.
/// Produces the same coefficients and KL sums as `project_clustered`
/// (up to round-off) at O(k^3) per subset instead of O(n k^2).
pub struct GramProjector {
    /// (p+1) x (p+1) gram of the intercept-augmented design.
    gram: DMatrix<f64>,
    /// (p+1) x C cross products design^T ref_mu per cluster.
    cross: DMatrix<f64>,
    /// ref_mu^T ref_mu per cluster.
    ref_sq: Vec<f64>,
    /// sigma* per cluster.
    sigma_ref: Vec<f64>,
    weights: DVector<f64>,
    n: usize,
}

impl GramProjector {
    pub fn new(dataset: &Dataset, clusters: &ClusteredDraws) -> Result<GramProjector> {
        if dataset.family != Family::Gaussian {
            return Err(Error::InvalidArgument(
                "gram projector supports only the Gaussian family".into(),
            ));
        }
        let sigma = clusters.dispersion.as_ref().ok_or_else(|| {
            Error::InvalidArgument("Gaussian clusters must carry dispersions".into())
        })?;
        let n = dataset.n();
        let p = dataset.p();
        let c = clusters.n_clusters();
        let mut design = DMatrix::zeros(n, p + 1);
        design.column_mut(0).fill(1.0);
        for j in 0..p {
            design.set_column(j + 1, &dataset.x.column(j));
        }
        let gram = design.transpose() * &design;
        let cross = design.transpose() * clusters.fitted_means.transpose();
        let ref_sq = (0..c)
            .map(|cl| clusters.fitted_means.row(cl).norm_squared())
            .collect();
        Ok(GramProjector {
            gram,
            cross,
            ref_sq,
            sigma_ref: sigma.iter().cloned().collect(),
            weights: clusters.weights.clone(),
            n,
        })
    }

    /// KL total for the submodel given by `indices` (intercept
    /// implicit), without materializing fitted values.
    pub fn kl_total(&self, indices: &[usize]) -> Result<f64> {
        let (_, kls) = self.project(indices)?;
        Ok(kls
            .iter()
            .zip(self.weights.iter())
            .map(|(kl, w)| kl * w)
            .sum())
    }

    /// Per-cluster coefficients and KL sums for a subset.
    pub fn project(&self, indices: &[usize]) -> Result<(DMatrix<f64>, Vec<f64>)> {
        let k1 = indices.len() + 1;
        let c = self.sigma_ref.len();
        let mut cols = Vec::with_capacity(k1);
        cols.push(0usize);
        cols.extend(indices.iter().map(|&j| j + 1));
        let mut gram_sub = DMatrix::zeros(k1, k1);
        for (a, &ca) in cols.iter().enumerate() {
            for (b, &cb) in cols.iter().enumerate() {
                gram_sub[(a, b)] = self.gram[(ca, cb)];
            }
        }
        let n = self.n as f64;
        let mut coefficients = DMatrix::zeros(c, k1);
        let mut kls = Vec::with_capacity(c);
        for cluster in 0..c {
            let rhs = DVector::from_iterator(
                k1,
                cols.iter().map(|&col| self.cross[(col, cluster)]),
            );
            let coef = gram_solve(&gram_sub, &rhs)?;
            // SSE = r'r - 2 b'c + b'G b, clamped against cancellation
            let quad = coef.dot(&(&gram_sub * &coef));
            let sse = (self.ref_sq[cluster] - 2.0 * coef.dot(&rhs) + quad).max(0.0);
            let s1 = self.sigma_ref[cluster];
            let sigma_sub2 = s1 * s1 + sse / n;
            let kl = n * (0.5 * (sigma_sub2 / (s1 * s1)).ln())
                + (n * s1 * s1 + sse) / (2.0 * sigma_sub2)
                - 0.5 * n;
            for j in 0..k1 {
                coefficients[(cluster, j)] = coef[j];
            }
            kls.push(kl);
        }
        Ok((coefficients, kls))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::linear_predictor;
    use crate::reference::{cluster_draws, fit_conjugate_gaussian, ConjugatePrior};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_gaussian(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let y = DVector::from_fn(n, |i, _| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            x.row(i).sum() + noise
        });
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Dataset::new(x, y, names, Family::Gaussian).unwrap()
    }

    #[test]
    fn full_rank_interpolation_gives_zero_kl() {
        let ds = toy_gaussian(20, 3, 1);
        let sub = Submodel::full(3);
        // reference mean that lies in the submodel span
        let coef_true = DVector::from_vec(vec![0.5, 1.0, -1.0, 2.0]);
        let ref_mu = linear_predictor(&ds, &sub, &coef_true).unwrap();
        let (coef, sigma, kl) = project_single(&ds, &sub, &ref_mu, Some(1.3)).unwrap();
        for j in 0..4 {
            assert_relative_eq!(coef[j], coef_true[j], epsilon = 1e-9);
        }
        assert_relative_eq!(sigma.unwrap(), 1.3, epsilon = 1e-10);
        assert!(kl.abs() < 1e-10);
    }

    #[test]
    fn intercept_only_gaussian_closed_form() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        let ds = Dataset::new(
            x,
            DVector::from_vec(vec![0.0, 0.0]),
            vec!["x1".into()],
            Family::Gaussian,
        )
        .unwrap();
        let ref_mu = DVector::from_vec(vec![1.0, 3.0]);
        let (coef, sigma, kl) =
            project_single(&ds, &Submodel::empty(), &ref_mu, Some(1.0)).unwrap();
        assert_relative_eq!(coef[0], 2.0, epsilon = 1e-12);
        // sigma_sub^2 = 1 + mean squared discrepancy = 1 + 1
        assert_relative_eq!(sigma.unwrap(), 2.0f64.sqrt(), epsilon = 1e-12);
        // closed-form Gaussian KL summed over the two observations
        let s2: f64 = 2.0f64.sqrt();
        let expect: f64 = (0..2)
            .map(|i| {
                let mu1 = ref_mu[i];
                (s2 / 1.0f64).ln() + (1.0 + (mu1 - 2.0f64).powi(2)) / (2.0 * s2 * s2) - 0.5
            })
            .sum();
        assert_relative_eq!(kl, expect, epsilon = 1e-12);
        // numeric minimization oracle: grid around the solution cannot beat it
        for c0 in [1.8, 1.9, 2.1, 2.2] {
            for s in [1.2, 1.4, 1.6] {
                let alt: f64 = (0..2)
                    .map(|i| {
                        let mu1: f64 = ref_mu[i];
                        (s / 1.0f64).ln() + (1.0 + (mu1 - c0 as f64).powi(2)) / (2.0 * s * s) - 0.5
                    })
                    .sum();
                assert!(alt >= kl - 1e-12);
            }
        }
    }

    #[test]
    fn bernoulli_intercept_only_matches_mean() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        let ds = Dataset::new(
            x,
            DVector::from_vec(vec![0.0, 1.0]),
            vec!["x1".into()],
            Family::Bernoulli,
        )
        .unwrap();
        let ref_mu = DVector::from_vec(vec![0.2, 0.4]);
        let (coef, _, kl) = project_single(&ds, &Submodel::empty(), &ref_mu, None).unwrap();
        let expect = (0.3f64 / 0.7).ln();
        assert_relative_eq!(coef[0], expect, epsilon = 1e-6);
        // 1-d grid search oracle
        let kl_at = |c0: f64| -> f64 {
            let q = 1.0 / (1.0 + (-c0 as f64).exp());
            ref_mu
                .iter()
                .map(|&p| p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln())
                .sum()
        };
        for step in -40..=40 {
            let c0 = expect + step as f64 * 0.05;
            assert!(kl_at(c0) >= kl - 1e-9);
        }
    }

    #[test]
    fn poisson_intercept_only_matches_mean() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0; 3]);
        let ds = Dataset::new(
            x,
            DVector::from_vec(vec![1.0, 2.0, 0.0]),
            vec!["x1".into()],
            Family::Poisson,
        )
        .unwrap();
        let ref_mu = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let (coef, _, _) = project_single(&ds, &Submodel::empty(), &ref_mu, None).unwrap();
        assert_relative_eq!(coef[0], 2.0f64.ln(), epsilon = 1e-7);
    }

    #[test]
    fn drawwise_single_draw_reduces_to_single() {
        let ds = toy_gaussian(15, 2, 2);
        let draws = fit_conjugate_gaussian(&ds, &ConjugatePrior::default(), 1, 5).unwrap();
        let sub = Submodel::new(vec![0], 2).unwrap();
        let projected = project_drawwise(&ds, &sub, &draws).unwrap();
        let mus = reference_fitted_means(&draws, &ds);
        let (coef, sigma, kl) = project_single(
            &ds,
            &sub,
            &mus.row(0).transpose(),
            Some(draws.dispersion.as_ref().unwrap()[0]),
        )
        .unwrap();
        assert_eq!(projected.coefficients.row(0).transpose(), coef);
        assert_eq!(projected.dispersion.as_ref().unwrap()[0], sigma.unwrap());
        assert_relative_eq!(projected.kl_total, kl, epsilon = 1e-12);
    }

    #[test]
    fn full_submodel_identity_projection() {
        let ds = toy_gaussian(30, 3, 3);
        let draws = fit_conjugate_gaussian(&ds, &ConjugatePrior::default(), 10, 6).unwrap();
        let projected = project_drawwise(&ds, &Submodel::full(3), &draws).unwrap();
        for s in 0..10 {
            for j in 0..4 {
                assert_relative_eq!(
                    projected.coefficients[(s, j)],
                    draws.coefficients[(s, j)],
                    epsilon = 1e-7
                );
            }
        }
        assert!(projected.kl_total < 1e-10);
    }

    #[test]
    fn clustered_c_eq_s_matches_drawwise_bitwise() {
        let ds = toy_gaussian(20, 2, 4);
        let draws = fit_conjugate_gaussian(&ds, &ConjugatePrior::default(), 9, 8).unwrap();
        let clusters = cluster_draws(&draws, &ds, 9, 1).unwrap();
        let sub = Submodel::new(vec![1], 2).unwrap();
        let a = project_drawwise(&ds, &sub, &draws).unwrap();
        let b = project_clustered(&ds, &sub, &clusters).unwrap();
        assert_eq!(a.coefficients, b.coefficients);
        assert_eq!(a.dispersion.unwrap(), b.dispersion.unwrap());
        assert_eq!(a.kl_total.to_bits(), b.kl_total.to_bits());
    }

    #[test]
    fn clustered_c_eq_1_matches_single_point() {
        let ds = toy_gaussian(20, 2, 5);
        let draws = fit_conjugate_gaussian(&ds, &ConjugatePrior::default(), 7, 9).unwrap();
        let clusters = cluster_draws(&draws, &ds, 1, 1).unwrap();
        let sub = Submodel::new(vec![0], 2).unwrap();
        let a = project_clustered(&ds, &sub, &clusters).unwrap();
        let b = project_single(
            &ds,
            &sub,
            &clusters.fitted_means.row(0).transpose(),
            Some(clusters.dispersion.as_ref().unwrap()[0]),
        )
        .unwrap();
        assert_eq!(a.coefficients.row(0).transpose(), b.0);
        assert_eq!(a.dispersion.unwrap()[0], b.1.unwrap());
    }

    #[test]
    fn coefficients_invariant_to_reference_dispersion() {
        let ds = toy_gaussian(25, 3, 6);
        let sub = Submodel::new(vec![0, 2], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ref_mu = DVector::from_fn(25, |_, _| rng.gen_range(-2.0..2.0));
        let (a, _, _) = project_single(&ds, &sub, &ref_mu, Some(1.0)).unwrap();
        let (b, _, _) = project_single(&ds, &sub, &ref_mu, Some(2.0)).unwrap();
        for j in 0..3 {
            assert_eq!(a[j].to_bits(), b[j].to_bits());
        }
    }

    #[test]
    fn dispersion_never_shrinks() {
        let ds = toy_gaussian(40, 4, 7);
        let draws = fit_conjugate_gaussian(&ds, &ConjugatePrior::default(), 30, 11).unwrap();
        let sub = Submodel::new(vec![0], 4).unwrap();
        let projected = project_drawwise(&ds, &sub, &draws).unwrap();
        let ref_sigma = draws.dispersion.as_ref().unwrap();
        let sub_sigma = projected.dispersion.as_ref().unwrap();
        for s in 0..30 {
            assert!(sub_sigma[s] >= ref_sigma[s]);
        }
    }

    #[test]
    fn nested_submodels_kl_monotone() {
        let ds = toy_gaussian(30, 4, 8);
        let draws = fit_conjugate_gaussian(&ds, &ConjugatePrior::default(), 15, 12).unwrap();
        let small = Submodel::new(vec![0], 4).unwrap();
        let big = Submodel::new(vec![0, 1], 4).unwrap();
        let a = project_drawwise(&ds, &small, &draws).unwrap();
        let b = project_drawwise(&ds, &big, &draws).unwrap();
        assert!(b.kl_total <= a.kl_total + 1e-6);
    }

    #[test]
    fn gaussian_matches_numeric_kl_minimizer() {
        // independent oracle: coordinate descent directly on the summed
        // Gaussian KL objective over (beta, sigma)
        let ds = toy_gaussian(12, 2, 9);
        let sub = Submodel::new(vec![0, 1], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ref_mu = DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
        let sigma_ref = 0.8;
        let (coef, sigma, kl) = project_single(&ds, &sub, &ref_mu, Some(sigma_ref)).unwrap();

        let objective = |c: &[f64], s: f64| -> f64 {
            let coefs = DVector::from_row_slice(c);
            let fit = linear_predictor(&ds, &sub, &coefs).unwrap();
            (0..12)
                .map(|i| {
                    (s / sigma_ref).ln()
                        + (sigma_ref * sigma_ref + (ref_mu[i] - fit[i]).powi(2)) / (2.0 * s * s)
                        - 0.5
                })
                .sum()
        };
        // gradient-free refinement starting away from the solution
        let mut best = vec![0.0, 0.0, 0.0];
        let mut best_s = sigma_ref;
        let mut best_val = objective(&best, best_s);
        let mut scale = 0.5;
        for _round in 0..60 {
            let mut improved = false;
            for dim in 0..4 {
                for dir in [-1.0, 1.0] {
                    let mut cand = best.clone();
                    let mut cand_s = best_s;
                    if dim < 3 {
                        cand[dim] += dir * scale;
                    } else {
                        cand_s = (cand_s + dir * scale).max(1e-3);
                    }
                    let val = objective(&cand, cand_s);
                    if val < best_val {
                        best = cand;
                        best_s = cand_s;
                        best_val = val;
                        improved = true;
                    }
                }
            }
            if !improved {
                scale *= 0.5;
            }
        }
        assert_relative_eq!(kl, best_val, max_relative = 1e-6);
        for j in 0..3 {
            assert_relative_eq!(coef[j], best[j], epsilon = 1e-4);
        }
        assert_relative_eq!(sigma.unwrap(), best_s, epsilon = 1e-4);
    }

    #[test]
    fn mixture_log_density_matches_naive_sum() {
        let ds = toy_gaussian(10, 2, 11);
        let draws = fit_conjugate_gaussian(&ds, &ConjugatePrior::default(), 6, 13).unwrap();
        let sub = Submodel::new(vec![0], 2).unwrap();
        let projected = project_drawwise(&ds, &sub, &draws).unwrap();
        let comp_ld = projected.component_log_densities(&ds).unwrap();
        for i in 0..10 {
            let naive: f64 = (0..6)
                .map(|c| projected.weights[c] * comp_ld[(c, i)].exp())
                .sum();
            let stable = predictive_log_density(&projected, &ds, i).unwrap();
            assert_relative_eq!(stable, naive.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn equal_components_equal_mixture() {
        let ds = toy_gaussian(5, 1, 12);
        let mut coefs = DMatrix::zeros(2, 2);
        coefs[(0, 0)] = 0.4;
        coefs[(0, 1)] = 1.0;
        coefs[(1, 0)] = 0.4;
        coefs[(1, 1)] = 1.0;
        let projected = ProjectedPosterior {
            submodel: Submodel::new(vec![0], 1).unwrap(),
            coefficients: coefs,
            dispersion: Some(DVector::from_vec(vec![1.0, 1.0])),
            weights: DVector::from_vec(vec![0.5, 0.5]),
            kl_total: 0.0,
        };
        let single = log_density(
            Family::Gaussian,
            ds.y[2],
            0.4 + ds.x[(2, 0)],
            Some(1.0),
        )
        .unwrap();
        assert_relative_eq!(
            predictive_log_density(&projected, &ds, 2).unwrap(),
            single,
            epsilon = 1e-12
        );
    }

    #[test]
    fn gram_projector_matches_project_clustered() {
        let ds = toy_gaussian(40, 5, 13);
        let draws = fit_conjugate_gaussian(&ds, &ConjugatePrior::default(), 50, 14).unwrap();
        let clusters = cluster_draws(&draws, &ds, 4, 15).unwrap();
        let gp = GramProjector::new(&ds, &clusters).unwrap();
        for indices in [vec![], vec![2], vec![0, 3], vec![0, 1, 2, 3, 4]] {
            let sub = Submodel::new(indices.clone(), 5).unwrap();
            let direct = project_clustered(&ds, &sub, &clusters).unwrap();
            let (coefs, kls) = gp.project(&indices).unwrap();
            let kl_fast: f64 = kls
                .iter()
                .zip(clusters.weights.iter())
                .map(|(kl, w)| kl * w)
                .sum();
            assert_relative_eq!(direct.kl_total, kl_fast, epsilon = 1e-6);
            for c in 0..4 {
                for j in 0..=indices.len() {
                    assert_relative_eq!(
                        direct.coefficients[(c, j)],
                        coefs[(c, j)],
                        epsilon = 1e-7
                    );
                }
            }
        }
    }

    #[test]
    fn irls_projection_on_bernoulli_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 60;
        let x = DMatrix::from_fn(n, 2, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let y = DVector::from_fn(n, |i, _| {
            let p = 1.0 / (1.0 + (-(x[(i, 0)] - 0.3)).exp());
            if rng.gen_range(0.0..1.0) < p {
                1.0
            } else {
                0.0
            }
        });
        let ds = Dataset::new(x, y, vec!["x1".into(), "x2".into()], Family::Bernoulli).unwrap();
        // reference mean from a known coefficient vector
        let truth = DVector::from_vec(vec![-0.3, 1.0, 0.0]);
        let full = Submodel::full(2);
        let ref_mu = mean_from_eta(
            Family::Bernoulli,
            &linear_predictor(&ds, &full, &truth).unwrap(),
        );
        let (coef, _, kl) = project_single(&ds, &full, &ref_mu, None).unwrap();
        for j in 0..3 {
            assert_relative_eq!(coef[j], truth[j], epsilon = 1e-5);
        }
        assert!(kl < 1e-9);
    }
}
