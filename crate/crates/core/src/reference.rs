//! Reference-model posterior draws: an exact conjugate ridge fitter for
//! Gaussian data, ingestion of externally produced draws, thinning, and
//! clustering for cheap projection.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mean_from_eta, Dataset, Family, PosteriorDraws};

/// Normal-inverse-gamma ridge prior for the conjugate Gaussian fitter.
/// `ridge_scale` is the prior sd of standardized coefficients (scaled
/// by sigma); the intercept gets a wide `intercept_scale` prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConjugatePrior {
    pub ridge_scale: f64,
    pub a0: f64,
    pub b0: f64,
    #[serde(default = "default_intercept_scale")]
    pub intercept_scale: f64,
}

fn default_intercept_scale() -> f64 {
    10.0
}

impl Default for ConjugatePrior {
    fn default() -> Self {
        ConjugatePrior { ridge_scale: 1.0, a0: 2.0, b0: 1.0, intercept_scale: 10.0 }
    }
}

impl ConjugatePrior {
    pub fn validate(&self) -> Result<()> {
        if self.ridge_scale <= 0.0 || self.a0 <= 0.0 || self.b0 <= 0.0 || self.intercept_scale <= 0.0
        {
            return Err(Error::InvalidArgument("prior hyperparameters must be positive".into()));
        }
        Ok(())
    }

    /// Per-coefficient prior sds (conditional on sigma): intercept, then
    /// ridge_scale divided by each column's sample sd so the prior acts
    /// on standardized coefficients.
    pub fn coefficient_scales(&self, dataset: &Dataset) -> DVector<f64> {
        let p = dataset.p();
        let n = dataset.n() as f64;
        let mut scales = DVector::from_element(p + 1, self.intercept_scale);
        for j in 0..p {
            let col = dataset.x.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            scales[j + 1] = if sd > 0.0 { self.ridge_scale / sd } else { self.ridge_scale };
        }
        scales
    }
}

/// Exact posterior of the normal-inverse-gamma ridge regression.
pub struct NigPosterior {
    /// Posterior mean of (intercept, coefficients).
    pub mean: DVector<f64>,
    /// Posterior precision (Lambda_n), scaled by 1/sigma^2.
    pub precision: DMatrix<f64>,
    pub a_n: f64,
    pub b_n: f64,
}

impl NigPosterior {
    /// Marginal posterior sd of coefficient j (Student-t scale adjusted
    /// to an sd, valid for a_n > 1).
    pub fn coefficient_sd(&self, j: usize) -> f64 {
        let cov = self
            .precision
            .clone()
            .cholesky()
            .expect("posterior precision is positive definite")
            .inverse();
        (self.b_n / (self.a_n - 1.0) * cov[(j, j)]).sqrt()
    }
}

/// Closed-form NIG posterior for the ridge prior on Gaussian data.
pub fn conjugate_posterior(dataset: &Dataset, prior: &ConjugatePrior) -> Result<NigPosterior> {
    prior.validate()?;
    if dataset.family != Family::Gaussian {
        return Err(Error::InvalidArgument(
            "conjugate fitter requires a Gaussian family".into(),
        ));
    }
    let n = dataset.n();
    let p = dataset.p();
    let mut design = DMatrix::zeros(n, p + 1);
    design.column_mut(0).fill(1.0);
    for j in 0..p {
        design.set_column(j + 1, &dataset.x.column(j));
    }
    let scales = prior.coefficient_scales(dataset);
    let mut precision = design.transpose() * &design;
    for j in 0..=p {
        precision[(j, j)] += 1.0 / (scales[j] * scales[j]);
    }
    let chol = precision.clone().cholesky().ok_or_else(|| {
        Error::SingularDesign("normal equations singular; ridge_scale too large or degenerate X".into())
    })?;
    let xty = design.transpose() * &dataset.y;
    let mean = chol.solve(&xty);
    let a_n = prior.a0 + n as f64 / 2.0;
    let yty = dataset.y.dot(&dataset.y);
    let fit_quad = mean.dot(&xty);
    let b_n = prior.b0 + 0.5 * (yty - fit_quad).max(0.0);
    Ok(NigPosterior { mean, precision, a_n, b_n })
}

/// Draws S exact samples from the conjugate posterior; deterministic
/// given the seed.
pub fn fit_conjugate_gaussian(
    dataset: &Dataset,
    prior: &ConjugatePrior,
    n_draws: usize,
    seed: u64,
) -> Result<PosteriorDraws> {
    if n_draws == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let posterior = conjugate_posterior(dataset, prior)?;
    let p1 = posterior.mean.len();
    let chol = posterior
        .precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("posterior precision not positive definite".into()))?;
    let l_t = chol.l().transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(posterior.a_n, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("invalid gamma parameters: {e}")))?;
    let mut coefficients = DMatrix::zeros(n_draws, p1);
    let mut sigmas = DVector::zeros(n_draws);
    for s in 0..n_draws {
        let g: f64 = gamma.sample(&mut rng);
        let sigma2 = posterior.b_n / g;
        let sigma = sigma2.sqrt();
        let z = DVector::from_fn(p1, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        // beta = mean + sigma * L^-T z
        let u = l_t.clone().solve_upper_triangular(&z).ok_or_else(|| {
            Error::SingularDesign("triangular solve failed in posterior sampling".into())
        })?;
        for j in 0..p1 {
            coefficients[(s, j)] = posterior.mean[j] + sigma * u[j];
        }
        sigmas[s] = sigma;
    }
    PosteriorDraws::new(coefficients, Some(sigmas), None)
}

/// Reads and validates a (draws, data) pair from CSV files.
pub fn ingest_draws(
    draws_file: &Path,
    data_file: &Path,
    family: Family,
) -> Result<(Dataset, PosteriorDraws)> {
    let dataset = Dataset::read_csv(data_file, family)?;
    let draws = PosteriorDraws::read_csv(draws_file, family)?;
    if draws.n_predictors() != dataset.p() {
        return Err(Error::DimensionMismatch(format!(
            "draws have {} coefficients but data has {} predictors",
            draws.n_predictors() + 1,
            dataset.p()
        )));
    }
    Ok((dataset, draws))
}

/// Evenly strided subsample of the draws with a seeded offset; weights
/// are re-uniformized.
pub fn thin_draws(draws: &PosteriorDraws, target: usize, seed: u64) -> Result<PosteriorDraws> {
    let s = draws.n_draws();
    if target == 0 || target > s {
        return Err(Error::InvalidArgument(format!(
            "thinning target {target} out of range 1..={s}"
        )));
    }
    if target == s {
        return PosteriorDraws::new(
            draws.coefficients.clone(),
            draws.dispersion.clone(),
            None,
        );
    }
    let stride = s as f64 / target as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_offset = stride.floor().max(1.0) as u64;
    let offset = rng.gen_range(0..max_offset) as f64;
    let indices: Vec<usize> = (0..target)
        .map(|i| ((offset + i as f64 * stride).floor() as usize).min(s - 1))
        .collect();
    let p1 = draws.coefficients.ncols();
    let mut coefficients = DMatrix::zeros(target, p1);
    for (row, &idx) in indices.iter().enumerate() {
        coefficients.set_row(row, &draws.coefficients.row(idx));
    }
    let dispersion = draws
        .dispersion
        .as_ref()
        .map(|d| DVector::from_iterator(target, indices.iter().map(|&idx| d[idx])));
    PosteriorDraws::new(coefficients, dispersion, None)
}

/// Posterior draws grouped into C clusters for cheap projection.
/// Centroids are within-cluster averages of the parameter draws; the
/// projection target per cluster is the average of the member draws'
/// fitted means.
#[derive(Debug, Clone)]
pub struct ClusteredDraws {
    /// C x (p+1) parameter centroids.
    pub centroids: DMatrix<f64>,
    /// sqrt of the within-cluster mean of sigma^2, Gaussian only.
    pub dispersion: Option<DVector<f64>>,
    /// count_c / S.
    pub weights: DVector<f64>,
    /// Cluster label per source draw.
    pub source_assignment: Vec<usize>,
    /// C x n average fitted means; the per-cluster projection target.
    pub fitted_means: DMatrix<f64>,
}

impl ClusteredDraws {
    pub fn n_clusters(&self) -> usize {
        self.centroids.nrows()
    }
}

/// S x n matrix of reference fitted means, one row per draw.
pub fn reference_fitted_means(draws: &PosteriorDraws, dataset: &Dataset) -> DMatrix<f64> {
    let s = draws.n_draws();
    let n = dataset.n();
    let p = dataset.p();
    let mut mus = DMatrix::zeros(s, n);
    for draw in 0..s {
        let mut eta = DVector::from_element(n, draws.coefficients[(draw, 0)]);
        for j in 0..p {
            let c = draws.coefficients[(draw, j + 1)];
            if c != 0.0 {
                eta.axpy(c, &dataset.x.column(j).clone_owned(), 1.0);
            }
        }
        mus.set_row(draw, &mean_from_eta(dataset.family, &eta).transpose());
    }
    mus
}

/// Clusters the draws by k-means (k-means++ init) on the S x n matrix
/// of reference fitted means. C = S and C = 1 are handled exactly so
/// the limiting equalities with the draw-wise and single-point
/// projections hold bit-for-bit.
pub fn cluster_draws(
    draws: &PosteriorDraws,
    dataset: &Dataset,
    n_clusters: usize,
    seed: u64,
) -> Result<ClusteredDraws> {
    let s = draws.n_draws();
    if n_clusters == 0 || n_clusters > s {
        return Err(Error::InvalidArgument(format!(
            "cluster count {n_clusters} out of range 1..={s}"
        )));
    }
    let mus = reference_fitted_means(draws, dataset);
    let assignment = if n_clusters == s {
        (0..s).collect()
    } else if n_clusters == 1 {
        vec![0; s]
    } else {
        kmeans_assign(&mus, n_clusters, seed)?
    };
    build_clusters(draws, &mus, &assignment, n_clusters)
}

fn build_clusters(
    draws: &PosteriorDraws,
    mus: &DMatrix<f64>,
    assignment: &[usize],
    n_clusters: usize,
) -> Result<ClusteredDraws> {
    let s = draws.n_draws();
    let p1 = draws.coefficients.ncols();
    let n = mus.ncols();
    let mut counts = vec![0usize; n_clusters];
    for &c in assignment {
        counts[c] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::EmptyCluster { restarts: 0 });
    }
    let mut centroids = DMatrix::zeros(n_clusters, p1);
    let mut fitted_means = DMatrix::zeros(n_clusters, n);
    let mut sigma2_sums = vec![0.0; n_clusters];
    for draw in 0..s {
        let c = assignment[draw];
        for j in 0..p1 {
            centroids[(c, j)] += draws.coefficients[(draw, j)];
        }
        for i in 0..n {
            fitted_means[(c, i)] += mus[(draw, i)];
        }
        if let Some(d) = &draws.dispersion {
            sigma2_sums[c] += d[draw] * d[draw];
        }
    }
    for c in 0..n_clusters {
        let inv = 1.0 / counts[c] as f64;
        for j in 0..p1 {
            centroids[(c, j)] *= inv;
        }
        for i in 0..n {
            fitted_means[(c, i)] *= inv;
        }
    }
    let dispersion = draws.dispersion.as_ref().map(|_| {
        DVector::from_iterator(
            n_clusters,
            (0..n_clusters).map(|c| (sigma2_sums[c] / counts[c] as f64).sqrt()),
        )
    });
    let weights =
        DVector::from_iterator(n_clusters, counts.iter().map(|&c| c as f64 / s as f64));
    Ok(ClusteredDraws {
        centroids,
        dispersion,
        weights,
        source_assignment: assignment.to_vec(),
        fitted_means,
    })
}

fn sq_dist(points: &DMatrix<f64>, row: usize, b: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..b.len() {
        let d = points[(row, i)] - b[i];
        acc += d * d;
    }
    acc
}

/// Lloyd's algorithm with k-means++ seeding; restarts with a fresh
/// seeded init when a cluster empties, up to 10 times.
fn kmeans_assign(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    const MAX_RESTARTS: usize = 10;
    for restart in 0..MAX_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        match kmeans_once(points, k, &mut rng) {
            Ok(assignment) => return Ok(assignment),
            Err(Error::EmptyCluster { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::EmptyCluster { restarts: MAX_RESTARTS })
}

fn kmeans_once(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let s = points.nrows();
    let dim = points.ncols();
    // k-means++ init
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..s);
    centers.push(points.row(first).transpose());
    let mut d2: Vec<f64> = (0..s).map(|i| sq_dist(points, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.gen_range(0..s)
        } else {
            let mut u = rng.gen_range(0.0..total);
            let mut chosen = s - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        };
        let c = points.row(idx).transpose();
        for i in 0..s {
            d2[i] = d2[i].min(sq_dist(points, i, &c));
        }
        centers.push(c);
    }
    let mut assignment = vec![0usize; s];
    for _iter in 0..100 {
        let mut changed = false;
        for i in 0..s {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(points, i, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        for &c in &assignment {
            counts[c] += 1;
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::EmptyCluster { restarts: 0 });
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            center.fill(0.0);
            for i in 0..s {
                if assignment[i] == c {
                    for j in 0..dim {
                        center[j] += points[(i, j)];
                    }
                }
            }
            *center /= counts[c] as f64;
        }
    }
    Ok(assignment)
}
