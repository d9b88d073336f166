//! Predictive utility (elpd) estimation for submodels along a solution
//! path: full-data PSIS-LOO, and K-fold CV that repeats the search
//! inside each fold.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_density, log_sum_exp, Dataset, PosteriorDraws};
use crate::projection::{project_drawwise, ProjectedPosterior};
use crate::psis::{normalize_log_weights, pareto_smooth};
use crate::reference::{cluster_draws, reference_fitted_means, thin_draws};
use crate::search::{forward_search, l1_search, SearchConfig, SearchMethod, SolutionPath};

pub const KHAT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_EVAL_DRAWS: usize = 400;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsisDiagnostics {
    pub khat_per_observation: Vec<f64>,
    pub threshold: f64,
}

impl PsisDiagnostics {
    pub fn n_flagged(&self) -> usize {
        self.khat_per_observation
            .iter()
            .filter(|&&k| k > self.threshold)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluationScheme {
    FullDataPsisLoo,
    KFold,
    KFoldWithSearch,
}

/// Pointwise and aggregated elpd along a path; size 0 is intercept-only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEvaluation {
    pub sizes: Vec<usize>,
    /// (sizes)×n pointwise utilities u_k^(i); NaN marks observations
    /// not scored (skipped folds), excluded from aggregation.
    pub pointwise_utilities: Vec<Vec<f64>>,
    pub reference_pointwise: Vec<f64>,
    pub delta_elpd: Vec<f64>,
    pub se_delta: Vec<f64>,
    pub elpd: Vec<f64>,
    pub reference_elpd: f64,
    pub scheme: EvaluationScheme,
    pub diagnostics: PsisDiagnostics,
}

impl PathEvaluation {
    fn from_pointwise(
        sizes: Vec<usize>,
        pointwise: Vec<Vec<f64>>,
        reference_pointwise: Vec<f64>,
        scheme: EvaluationScheme,
        diagnostics: PsisDiagnostics,
    ) -> PathEvaluation {
        let mut delta_elpd = Vec::with_capacity(sizes.len());
        let mut se_delta = Vec::with_capacity(sizes.len());
        let mut elpd = Vec::with_capacity(sizes.len());
        for row in &pointwise {
            let diffs: Vec<f64> = row
                .iter()
                .zip(&reference_pointwise)
                .filter(|(u, r)| u.is_finite() && r.is_finite())
                .map(|(u, r)| u - r)
                .collect();
            let m = diffs.len() as f64;
            let sum: f64 = diffs.iter().sum();
            let mean = sum / m;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
            delta_elpd.push(sum);
            se_delta.push((m * var).sqrt());
            elpd.push(row.iter().filter(|u| u.is_finite()).sum());
        }
        let reference_elpd = reference_pointwise.iter().filter(|u| u.is_finite()).sum();
        PathEvaluation {
            sizes,
            pointwise_utilities: pointwise,
            reference_pointwise,
            delta_elpd,
            se_delta,
            elpd,
            reference_elpd,
            scheme,
            diagnostics,
        }
    }

    pub fn n_sizes(&self) -> usize {
        self.sizes.len()
    }
}

/// Log importance ratios for observation i: log r^(s) = −log p(y_i|θ^s),
/// shifted by the maximum for stability.
pub fn importance_ratios(ref_log_dens: &DMatrix<f64>, i: usize) -> DVector<f64> {
    let col = ref_log_dens.column(i);
    let neg_max = col.iter().cloned().fold(f64::INFINITY, f64::min);
    DVector::from_fn(col.len(), |s, _| -(col[s]) + neg_max)
}

/// S×n matrix of log p(y_i | θ^s) given per-draw fitted means.
pub fn pointwise_log_density_matrix(
    dataset: &Dataset,
    fitted_means: &DMatrix<f64>,
    dispersion: Option<&DVector<f64>>,
) -> Result<DMatrix<f64>> {
    let s = fitted_means.nrows();
    let n = dataset.n();
    let mut out = DMatrix::zeros(s, n);
    for d in 0..s {
        let sigma = dispersion.map(|v| v[d]);
        for i in 0..n {
            out[(d, i)] = log_density(dataset.family, dataset.y[i], fitted_means[(d, i)], sigma)?;
        }
    }
    Ok(out)
}

/// Per-observation normalized, Pareto-smoothed log weights (S×n) from
/// reference-model log densities, plus k̂ diagnostics.
pub fn smoothed_log_weights(ref_log_dens: &DMatrix<f64>) -> Result<(DMatrix<f64>, PsisDiagnostics)> {
    let s = ref_log_dens.nrows();
    let n = ref_log_dens.ncols();
    let cols: Vec<Result<(DVector<f64>, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let lr = importance_ratios(ref_log_dens, i);
            let (smoothed, khat) = pareto_smooth(&lr)?;
            Ok((normalize_log_weights(&smoothed), khat))
        })
        .collect();
    let mut weights = DMatrix::zeros(s, n);
    let mut khat = Vec::with_capacity(n);
    for (i, col) in cols.into_iter().enumerate() {
        let (w, k) = col?;
        weights.set_column(i, &w);
        khat.push(k);
    }
    Ok((weights, PsisDiagnostics { khat_per_observation: khat, threshold: KHAT_THRESHOLD }))
}

/// Self-normalized estimate log Σ_s w_i^(s) p(y_i|θ^s) per observation.
pub fn weighted_elpd(model_log_dens: &DMatrix<f64>, log_weights: &DMatrix<f64>) -> Vec<f64> {
    let s = model_log_dens.nrows();
    let n = model_log_dens.ncols();
    (0..n)
        .map(|i| {
            let terms: Vec<f64> = (0..s)
                .map(|d| log_weights[(d, i)] + model_log_dens[(d, i)])
                .collect();
            log_sum_exp(&terms)
        })
        .collect()
}

/// PSIS-LOO elpd of a model whose per-draw pointwise log densities are
/// given; importance ratios always come from the reference model.
pub fn psis_loo_elpd(
    model_log_dens: &DMatrix<f64>,
    ref_log_dens: &DMatrix<f64>,
) -> Result<(Vec<f64>, PsisDiagnostics)> {
    if model_log_dens.shape() != ref_log_dens.shape() {
        return Err(Error::DimensionMismatch(format!(
            "model density matrix {:?} vs reference {:?}",
            model_log_dens.shape(),
            ref_log_dens.shape()
        )));
    }
    let (weights, diag) = smoothed_log_weights(ref_log_dens)?;
    Ok((weighted_elpd(model_log_dens, &weights), diag))
}

/// Log predictive density of a projected mixture at every observation
/// of `dataset` (which may differ from the fitting data).
pub fn mixture_log_density(
    projected: &ProjectedPosterior,
    dataset: &Dataset,
) -> Result<Vec<f64>> {
    let dens = projected.component_log_densities(dataset)?;
    let c = dens.nrows();
    let n = dens.ncols();
    Ok((0..n)
        .map(|i| {
            let terms: Vec<f64> = (0..c)
                .map(|comp| projected.weights[comp].ln() + dens[(comp, i)])
                .collect();
            log_sum_exp(&terms)
        })
        .collect())
}

/// Full-data search, PSIS-LOO evaluation: re-projects every prefix with
/// `eval_draws` thinned draws and scores via reference-model weights.
pub fn evaluate_path_fulldata(
    path: &SolutionPath,
    dataset: &Dataset,
    ref_draws: &PosteriorDraws,
    eval_draws: usize,
    seed: u64,
) -> Result<PathEvaluation> {
    let s = ref_draws.n_draws();
    let thinned = thin_draws(ref_draws, eval_draws.min(s), seed)?;
    let ref_mus = reference_fitted_means(&thinned, dataset);
    let ref_log_dens =
        pointwise_log_density_matrix(dataset, &ref_mus, thinned.dispersion.as_ref())?;
    let (weights, diagnostics) = smoothed_log_weights(&ref_log_dens)?;
    let reference_pointwise = weighted_elpd(&ref_log_dens, &weights);

    let sizes: Vec<usize> = (0..=path.order.len()).collect();
    let rows: Vec<Result<Vec<f64>>> = sizes
        .par_iter()
        .map(|&k| {
            let sub = path.prefix(k, dataset.p())?;
            let projected = project_drawwise(dataset, &sub, &thinned)?;
            let dens = projected.component_log_densities(dataset)?;
            Ok(weighted_elpd(&dens, &weights))
        })
        .collect();
    let mut pointwise = Vec::with_capacity(sizes.len());
    for row in rows {
        pointwise.push(row?);
    }
    Ok(PathEvaluation::from_pointwise(
        sizes,
        pointwise,
        reference_pointwise,
        EvaluationScheme::FullDataPsisLoo,
        diagnostics,
    ))
}

/// Over-optimism ("bulge") diagnostic: if any non-full size has
/// Δelpd − s_k > 0, return the size with the largest Δelpd — the
/// truncation point for a CV-with-search re-run.
pub fn detect_bulge(eval: &PathEvaluation) -> Option<usize> {
    let last = eval.sizes.len().checked_sub(1)?;
    let flagged = (0..last).any(|k| eval.delta_elpd[k] - eval.se_delta[k] > 0.0);
    if !flagged {
        return None;
    }
    let argmax = (0..last)
        .max_by(|&a, &b| eval.delta_elpd[a].partial_cmp(&eval.delta_elpd[b]).unwrap())?;
    Some(eval.sizes[argmax])
}

#[derive(Debug, Clone)]
pub struct CvConfig {
    pub k_folds: usize,
    pub search: SearchConfig,
    /// Thinning target for prefix projection at evaluation time.
    pub eval_draws: usize,
    /// Draws requested from the per-fold refit source.
    pub refit_draws: usize,
    pub seed: u64,
}

impl CvConfig {
    pub fn new(k_folds: usize, search: SearchConfig, seed: u64) -> CvConfig {
        CvConfig {
            k_folds,
            search,
            eval_draws: DEFAULT_EVAL_DRAWS,
            refit_draws: 1000,
            seed,
        }
    }
}

/// Seeded near-equal fold assignment: a random permutation dealt
/// round-robin into K folds.
pub fn kfold_assignments(n: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut fold = vec![0usize; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

fn subset_dataset(dataset: &Dataset, rows: &[usize]) -> Result<Dataset> {
    let p = dataset.p();
    let x = DMatrix::from_fn(rows.len(), p, |i, j| dataset.x[(rows[i], j)]);
    let y = DVector::from_fn(rows.len(), |i, _| dataset.y[rows[i]]);
    Dataset::new(x, y, dataset.predictor_names.clone(), dataset.family)
}

struct FoldResult {
    test_rows: Vec<usize>,
    /// (p_max+1) rows of test-point log predictive densities.
    submodel_lpd: Vec<Vec<f64>>,
    reference_lpd: Vec<f64>,
    path: SolutionPath,
}

fn run_fold<F>(
    dataset: &Dataset,
    fold_id: usize,
    assignment: &[usize],
    config: &CvConfig,
    refit: &F,
) -> Result<FoldResult>
where
    F: Fn(&Dataset, u64) -> Result<PosteriorDraws> + Sync,
{
    let train_rows: Vec<usize> = (0..dataset.n()).filter(|&i| assignment[i] != fold_id).collect();
    let test_rows: Vec<usize> = (0..dataset.n()).filter(|&i| assignment[i] == fold_id).collect();
    let train = subset_dataset(dataset, &train_rows)?;
    let test = subset_dataset(dataset, &test_rows)?;
    let fold_seed = config.seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(fold_id as u64 + 1));
    let draws = refit(&train, fold_seed)?;
    let path = match config.search.method {
        SearchMethod::Forward => {
            let clusters = cluster_draws(&draws, &train, config.search.clusters_c, fold_seed)?;
            forward_search(&train, &clusters, &config.search)?
        }
        SearchMethod::L1 => {
            let single = cluster_draws(&draws, &train, 1, fold_seed)?;
            let ref_mu = single.fitted_means.row(0).transpose();
            let sigma = single.dispersion.as_ref().map(|d| d[0]);
            l1_search(&train, &ref_mu, sigma, &config.search)?
        }
    };
    let thinned = thin_draws(&draws, config.eval_draws.min(draws.n_draws()), fold_seed)?;
    let mut submodel_lpd = Vec::with_capacity(path.order.len() + 1);
    for k in 0..=path.order.len() {
        let sub = path.prefix(k, dataset.p())?;
        let projected = project_drawwise(&train, &sub, &thinned)?;
        submodel_lpd.push(mixture_log_density(&projected, &test)?);
    }
    // reference predictive on the test points: equal-weight mixture
    let ref_mus = reference_fitted_means(&thinned, &test);
    let ref_dens = pointwise_log_density_matrix(&test, &ref_mus, thinned.dispersion.as_ref())?;
    let s = ref_dens.nrows();
    let log_s = (s as f64).ln();
    let reference_lpd: Vec<f64> = (0..test.n())
        .map(|i| {
            let terms: Vec<f64> = (0..s).map(|d| ref_dens[(d, i)]).collect();
            log_sum_exp(&terms) - log_s
        })
        .collect();
    Ok(FoldResult { test_rows, submodel_lpd, reference_lpd, path })
}

/// K-fold CV with the search repeated inside every fold. The refit
/// closure supplies reference draws for a training set (conjugate refit
/// or externally provided fold draws). Degenerate folds are skipped
/// with a warning; their test points stay NaN and are excluded.
pub fn kfold_cv_with_search<F>(
    dataset: &Dataset,
    config: &CvConfig,
    refit: &F,
) -> Result<(PathEvaluation, Vec<SolutionPath>)>
where
    F: Fn(&Dataset, u64) -> Result<PosteriorDraws> + Sync,
{
    let n = dataset.n();
    let k_folds = config.k_folds;
    if k_folds < 2 || k_folds > n {
        return Err(Error::InvalidArgument(format!(
            "k_folds {k_folds} out of range 2..={n}"
        )));
    }
    let assignment = kfold_assignments(n, k_folds, config.seed);
    let results: Vec<(usize, Result<FoldResult>)> = (0..k_folds)
        .into_par_iter()
        .map(|f| (f, run_fold(dataset, f, &assignment, config, refit)))
        .collect();
    let p_max = config.search.p_max;
    let mut pointwise = vec![vec![f64::NAN; n]; p_max + 1];
    let mut reference_pointwise = vec![f64::NAN; n];
    let mut paths = Vec::new();
    let mut skipped = 0usize;
    for (f, res) in results {
        match res {
            Ok(fold) => {
                for (k, row) in fold.submodel_lpd.iter().enumerate() {
                    for (pos, &i) in fold.test_rows.iter().enumerate() {
                        pointwise[k][i] = row[pos];
                    }
                }
                for (pos, &i) in fold.test_rows.iter().enumerate() {
                    reference_pointwise[i] = fold.reference_lpd[pos];
                }
                paths.push(fold.path);
            }
            Err(e) => {
                skipped += 1;
                log::warn!("fold {f} skipped: {e}");
            }
        }
    }
    if skipped == k_folds {
        return Err(Error::SearchFailure { size: 0, reason: "all CV folds failed".into() });
    }
    if skipped > 0 {
        log::warn!("{skipped}/{k_folds} folds skipped; effective K reduced");
    }
    let sizes: Vec<usize> = (0..=p_max).collect();
    // khat does not apply to exact K-fold scoring
    let diagnostics = PsisDiagnostics { khat_per_observation: Vec::new(), threshold: KHAT_THRESHOLD };
    let eval = PathEvaluation::from_pointwise(
        sizes,
        pointwise,
        reference_pointwise,
        EvaluationScheme::KFoldWithSearch,
        diagnostics,
    );
    Ok((eval, paths))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostEstimate {
    pub t_search: f64,
    pub t_eval: f64,
    pub t_total: f64,
}

/// Serial wall-time estimates for CV-with-search.
pub fn estimate_costs(k: usize, p: usize, c: usize, c_prime: usize, t_proj_seconds: f64) -> CostEstimate {
    let kf = k as f64;
    let pf = p as f64;
    let t_search = kf * (pf * (pf + 1.0) / 2.0 + 1.0) * t_proj_seconds;
    let t_eval = kf * (pf + 1.0) * (c_prime as f64 / c as f64) * t_proj_seconds;
    CostEstimate { t_search, t_eval, t_total: t_search + t_eval }
}
