//! Data-generating processes and study drivers: block-correlated and
//! weakly-relevant regression designs, the dispersion-inflation demo,
//! and simulation-based calibration of the full pipeline.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{kfold_cv_with_search, CvConfig};
use crate::model::{ln_gamma, Dataset, Family, Submodel};
use crate::projection::project_drawwise;
use crate::reference::{cluster_draws, fit_conjugate_gaussian, ConjugatePrior};
use crate::search::{forward_search, SearchConfig};
use crate::selection::select_size_se;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpKind {
    BlockCorrelated,
    WeaklyRelevant,
    OverfitDemo,
    Sbc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    pub kind: DgpKind,
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub r_squared: f64,
    pub xi: f64,
    pub sigma2: f64,
    pub seed: u64,
}

impl DgpConfig {
    pub fn block_correlated() -> DgpConfig {
        DgpConfig {
            kind: DgpKind::BlockCorrelated,
            n: 500,
            p: 100,
            rho: 0.9,
            r_squared: 0.7,
            xi: 0.59,
            sigma2: 1.0,
            seed: 0,
        }
    }

    pub fn weakly_relevant() -> DgpConfig {
        DgpConfig {
            kind: DgpKind::WeaklyRelevant,
            n: 500,
            p: 50,
            rho: 0.1,
            r_squared: 0.5,
            xi: 1.0,
            sigma2: 1.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::InvalidArgument("n and p must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!("rho {} outside [0,1)", self.rho)));
        }
        if !(0.0 < self.r_squared && self.r_squared < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "r_squared {} outside (0,1)",
                self.r_squared
            )));
        }
        if self.sigma2 <= 0.0 {
            return Err(Error::InvalidArgument("sigma2 must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth attached to a generated dataset.
#[derive(Debug, Clone, Serialize)]
pub struct DgpTruth {
    pub weights: Vec<f64>,
    pub sigma2: f64,
    /// Closed-form population R² = wᵀRw / (wᵀRw + σ²).
    pub population_r_squared: f64,
    pub relevant: Vec<usize>,
}

fn predictor_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

fn gaussian_response(
    x: &DMatrix<f64>,
    weights: &[f64],
    sigma2: f64,
    rng: &mut ChaCha8Rng,
) -> DVector<f64> {
    let n = x.nrows();
    let sigma = sigma2.sqrt();
    DVector::from_fn(n, |i, _| {
        let mut mu = 0.0;
        for (j, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                mu += w * x[(i, j)];
            }
        }
        let e: f64 = StandardNormal.sample(rng);
        mu + sigma * e
    })
}

/// Blocks of 5 equicorrelated predictors (shared-factor construction);
/// the first three blocks carry weights (ξ, ξ/2, ξ/4), the rest zero.
pub fn generate_block_correlated(config: &DgpConfig) -> Result<(Dataset, DgpTruth)> {
    config.validate()?;
    const BLOCK: usize = 5;
    if config.p % BLOCK != 0 {
        return Err(Error::InvalidArgument(format!(
            "p = {} not divisible by the block size {BLOCK}",
            config.p
        )));
    }
    let (n, p, rho) = (config.n, config.p, config.rho);
    let n_blocks = p / BLOCK;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for b in 0..n_blocks {
            let g: f64 = StandardNormal.sample(&mut rng);
            for k in 0..BLOCK {
                let e: f64 = StandardNormal.sample(&mut rng);
                x[(i, b * BLOCK + k)] = rho.sqrt() * g + (1.0 - rho).sqrt() * e;
            }
        }
    }
    let mut weights = vec![0.0; p];
    let block_weights = [config.xi, 0.5 * config.xi, 0.25 * config.xi];
    for (b, &w) in block_weights.iter().enumerate() {
        for k in 0..BLOCK {
            if b * BLOCK + k < p {
                weights[b * BLOCK + k] = w;
            }
        }
    }
    let y = gaussian_response(&x, &weights, config.sigma2, &mut rng);
    // within a block of constant weight w: wᵀRw adds w²(5 + ρ·5·4)
    let quad: f64 = block_weights
        .iter()
        .map(|w| w * w * (BLOCK as f64 + rho * (BLOCK * (BLOCK - 1)) as f64))
        .sum();
    let truth = DgpTruth {
        weights: weights.clone(),
        sigma2: config.sigma2,
        population_r_squared: quad / (quad + config.sigma2),
        relevant: (0..p).filter(|&j| weights[j] != 0.0).collect(),
    };
    let dataset = Dataset::new(x, y, predictor_names(p), Family::Gaussian)?;
    Ok((dataset, truth))
}

/// All p predictors equicorrelated at ρ; uniform weights scaled so the
/// population R² hits the target exactly.
pub fn generate_weakly_relevant(config: &DgpConfig) -> Result<(Dataset, DgpTruth)> {
    config.validate()?;
    let (n, p, rho) = (config.n, config.p, config.rho);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let g: f64 = StandardNormal.sample(&mut rng);
        for j in 0..p {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[(i, j)] = rho.sqrt() * g + (1.0 - rho).sqrt() * e;
        }
    }
    // uniform weights a: aᵀRa = a²(p + ρp(p−1)); solve for the target R²
    let quad_unit = p as f64 + rho * (p * (p - 1)) as f64;
    let a = (config.r_squared * config.sigma2 / ((1.0 - config.r_squared) * quad_unit)).sqrt();
    let weights = vec![a; p];
    let y = gaussian_response(&x, &weights, config.sigma2, &mut rng);
    let quad = a * a * quad_unit;
    let truth = DgpTruth {
        weights,
        sigma2: config.sigma2,
        population_r_squared: quad / (quad + config.sigma2),
        relevant: (0..p).collect(),
    };
    let dataset = Dataset::new(x, y, predictor_names(p), Family::Gaussian)?;
    Ok((dataset, truth))
}

/// Dispersion-inflation demo: wide-prior reference on n=100, p=95 with
/// 15 relevant predictors, projected onto exactly the relevant set.
#[derive(Debug, Clone, Serialize)]
pub struct DispersionReport {
    pub schema_version: u32,
    pub sigma_reference: Vec<f64>,
    pub sigma_projected: Vec<f64>,
    pub beta1_reference: (f64, f64),
    pub beta1_projected: (f64, f64),
    pub beta2_reference: (f64, f64),
    pub beta2_projected: (f64, f64),
    pub n: usize,
    pub p: usize,
    pub n_relevant: usize,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

pub fn run_dispersion_demo(seed: u64) -> Result<DispersionReport> {
    let (n, p, n_relevant) = (100usize, 95usize, 15usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v
    });
    let mut weights = vec![0.0; p];
    for w in weights.iter_mut().take(n_relevant) {
        *w = 0.5;
    }
    let y = gaussian_response(&x, &weights, 1.0, &mut rng);
    let dataset = Dataset::new(x, y, predictor_names(p), Family::Gaussian)?;
    // wide independent priors, prone to over-fitting
    let prior = ConjugatePrior { ridge_scale: 20.0, ..ConjugatePrior::default() };
    let draws = fit_conjugate_gaussian(&dataset, &prior, 400, seed ^ 0xd15)?;
    let sub = Submodel::new((0..n_relevant).collect(), p)?;
    let projected = project_drawwise(&dataset, &sub, &draws)?;
    let s = draws.n_draws();
    let sigma_reference: Vec<f64> = draws.dispersion.as_ref().unwrap().iter().cloned().collect();
    let sigma_projected: Vec<f64> =
        projected.dispersion.as_ref().unwrap().iter().cloned().collect();
    let ref_b1: Vec<f64> = (0..s).map(|d| draws.coefficients[(d, 1)]).collect();
    let ref_b2: Vec<f64> = (0..s).map(|d| draws.coefficients[(d, 2)]).collect();
    let proj_b1: Vec<f64> = (0..s).map(|d| projected.coefficients[(d, 1)]).collect();
    let proj_b2: Vec<f64> = (0..s).map(|d| projected.coefficients[(d, 2)]).collect();
    Ok(DispersionReport {
        schema_version: 1,
        sigma_reference,
        sigma_projected,
        beta1_reference: mean_sd(&ref_b1),
        beta1_projected: mean_sd(&proj_b1),
        beta2_reference: mean_sd(&ref_b2),
        beta2_projected: mean_sd(&proj_b2),
        n,
        p,
        n_relevant,
    })
}

// --- simulation-based calibration ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SbcConfig {
    pub n: usize,
    /// Predictor count including the treatment column (index 0).
    pub p: usize,
    pub k_folds: usize,
    pub n_draws: usize,
    pub clusters_c: usize,
    pub seed: u64,
    /// Multiplier on the fitting prior's ridge scale; 1.0 keeps fitting
    /// and generating priors identical (calibrated), larger values make
    /// the pipeline deliberately miscalibrated for contrast runs.
    pub fit_prior_inflation: f64,
}

impl SbcConfig {
    pub fn desk_scale(seed: u64) -> SbcConfig {
        SbcConfig {
            n: 60,
            p: 5,
            k_folds: 5,
            n_draws: 200,
            clusters_c: 5,
            seed,
            fit_prior_inflation: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EcdfBand {
    /// Evaluation levels in (0,1).
    pub levels: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Pointwise level achieving ~95% simultaneous coverage.
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SbcReport {
    pub schema_version: u32,
    /// Normalized ranks in [0,1], one per successful replication.
    pub normalized_ranks: Vec<f64>,
    pub n_requested: usize,
    pub n_failed: usize,
    pub selected_sizes: Vec<usize>,
    pub band: EcdfBand,
    pub passed: bool,
}

pub fn binomial_log_pmf(k: usize, n: usize, prob: f64) -> f64 {
    let (kf, nf) = (k as f64, n as f64);
    ln_gamma(nf + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0)
        + kf * prob.ln()
        + (nf - kf) * (1.0 - prob).ln()
}

pub fn binomial_cdf(k: usize, n: usize, prob: f64) -> f64 {
    if prob <= 0.0 {
        return 1.0;
    }
    if prob >= 1.0 {
        return if k >= n { 1.0 } else { 0.0 };
    }
    (0..=k.min(n)).map(|i| binomial_log_pmf(i, n, prob).exp()).sum::<f64>().min(1.0)
}

/// Smallest k with P(X ≤ k) ≥ q.
pub fn binomial_quantile(q: f64, n: usize, prob: f64) -> usize {
    let mut acc = 0.0;
    for k in 0..=n {
        acc += binomial_log_pmf(k, n, prob).exp();
        if acc >= q - 1e-12 {
            return k;
        }
    }
    n
}

fn ecdf_outside_band(ranks: &[f64], band: &EcdfBand, n: usize) -> bool {
    for (idx, &level) in band.levels.iter().enumerate() {
        let count = ranks.iter().filter(|&&r| r <= level).count() as f64 / n as f64;
        if count < band.lower[idx] - 1e-12 || count > band.upper[idx] + 1e-12 {
            return true;
        }
    }
    false
}

/// 95% simultaneous ECDF band for `n_ranks` draws from the discrete
/// uniform on {0, 1/s, ..., 1} with s+1 support points: pointwise
/// binomial-quantile bands whose level γ is calibrated by Monte Carlo
/// so the simultaneous non-coverage is 5%.
pub fn calibrate_ecdf_band(n_ranks: usize, rank_support: usize, seed: u64) -> Result<EcdfBand> {
    if n_ranks == 0 || rank_support < 2 {
        return Err(Error::InvalidArgument("need ranks and a support of at least 2".into()));
    }
    let n_levels = 50.min(rank_support);
    let levels: Vec<f64> =
        (1..=n_levels).map(|i| i as f64 / (n_levels + 1) as f64).collect();
    let band_at = |gamma: f64| -> EcdfBand {
        let lower: Vec<f64> = levels
            .iter()
            .map(|&l| binomial_quantile(gamma / 2.0, n_ranks, l) as f64 / n_ranks as f64)
            .collect();
        let upper: Vec<f64> = levels
            .iter()
            .map(|&l| binomial_quantile(1.0 - gamma / 2.0, n_ranks, l) as f64 / n_ranks as f64)
            .collect();
        EcdfBand { levels: levels.clone(), lower, upper, gamma }
    };
    // Monte Carlo rejection rate under uniformity for a candidate gamma
    let n_sims = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sims: Vec<Vec<f64>> = (0..n_sims)
        .map(|_| {
            (0..n_ranks)
                .map(|_| rng.gen_range(0..rank_support) as f64 / (rank_support - 1) as f64)
                .collect()
        })
        .collect();
    let rejection_rate = |band: &EcdfBand| -> f64 {
        sims.iter().filter(|s| ecdf_outside_band(s, band, n_ranks)).count() as f64
            / n_sims as f64
    };
    // bisect gamma for at most 5% simultaneous rejection; the target is
    // set slightly below 5% so Monte Carlo selection noise cannot push
    // the true rejection rate above the nominal level
    let target = 0.04;
    let (mut lo, mut hi) = (1e-5f64, 0.05f64);
    for _ in 0..25 {
        let mid = 0.5 * (lo + hi);
        if rejection_rate(&band_at(mid)) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(band_at(lo))
}

fn run_sbc_replication(config: &SbcConfig, rep_seed: u64) -> Result<(f64, usize)> {
    let (n, p) = (config.n, config.p);
    let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
    // independent standard-normal predictors plus a Bernoulli treatment
    // column at index 0
    let x = DMatrix::from_fn(n, p, |_, j| {
        if j == 0 {
            if rng.gen_bool(0.5) { 1.0 } else { 0.0 }
        } else {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        }
    });
    // ground truth drawn from the generating prior (the conjugate NIG
    // prior with data-dependent scales; X is drawn first, so valid)
    let gen_prior = ConjugatePrior::default();
    let placeholder = Dataset::new(x.clone(), DVector::zeros(n), predictor_names(p), Family::Gaussian)?;
    let scales = gen_prior.coefficient_scales(&placeholder);
    let gamma = Gamma::new(gen_prior.a0, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("invalid prior: {e}")))?;
    let sigma2_true = gen_prior.b0 / gamma.sample(&mut rng);
    let sigma_true = sigma2_true.sqrt();
    let beta_true = DVector::from_fn(p + 1, |j, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma_true * scales[j] * z
    });
    let y = DVector::from_fn(n, |i, _| {
        let mut mu = beta_true[0];
        for j in 0..p {
            mu += beta_true[j + 1] * x[(i, j)];
        }
        let e: f64 = StandardNormal.sample(&mut rng);
        mu + sigma_true * e
    });
    let dataset = Dataset::new(x, y, predictor_names(p), Family::Gaussian)?;
    let fit_prior = ConjugatePrior {
        ridge_scale: gen_prior.ridge_scale * config.fit_prior_inflation,
        ..gen_prior
    };
    let draws = fit_conjugate_gaussian(&dataset, &fit_prior, config.n_draws, rep_seed ^ 0xf17)?;

    let mut search = SearchConfig::forward(p, config.clusters_c, rep_seed);
    search.forced = vec![0];
    // size selection by K-fold CV with per-fold search, SE rule
    let mut cv = CvConfig::new(config.k_folds, search.clone(), rep_seed ^ 0xcf);
    cv.eval_draws = config.n_draws.min(200);
    cv.refit_draws = config.n_draws;
    let refit =
        |train: &Dataset, seed: u64| fit_conjugate_gaussian(train, &fit_prior, config.n_draws, seed);
    let (eval, _) = kfold_cv_with_search(&dataset, &cv, &refit)?;
    let (selected, _) = select_size_se(&eval);
    // the treatment must stay in the final submodel
    let selected = selected.max(1);

    // full-data search fixes the final predictor order
    let clusters = cluster_draws(&draws, &dataset, config.clusters_c, rep_seed)?;
    let path = forward_search(&dataset, &clusters, &search)?;
    let sub = path.prefix(selected, p)?;
    let projected = project_drawwise(&dataset, &sub, &draws)?;
    // treatment coefficient sits in slot 1 (forced to the front)
    debug_assert_eq!(sub.indices()[0], 0);
    let s = projected.coefficients.nrows();
    let rank = (0..s)
        .filter(|&d| projected.coefficients[(d, 1)] < beta_true[1])
        .count();
    Ok((rank as f64 / s as f64, selected))
}

/// Runs the full pipeline `replications` times on prior-generated data
/// and checks the normalized treatment-coefficient ranks against a 95%
/// simultaneous ECDF band.
pub fn run_sbc(replications: usize, config: &SbcConfig) -> Result<SbcReport> {
    if replications < 50 {
        return Err(Error::InvalidArgument(format!(
            "need at least 50 replications, got {replications}"
        )));
    }
    let results: Vec<Result<(f64, usize)>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let rep_seed = config
                .seed
                .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(r as u64 + 1));
            run_sbc_replication(config, rep_seed)
        })
        .collect();
    let mut normalized_ranks = Vec::new();
    let mut selected_sizes = Vec::new();
    let mut n_failed = 0usize;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok((rank, size)) => {
                normalized_ranks.push(rank);
                selected_sizes.push(size);
            }
            Err(e) => {
                n_failed += 1;
                log::warn!("SBC replication {r} failed: {e}");
            }
        }
    }
    if normalized_ranks.is_empty() {
        return Err(Error::SearchFailure { size: 0, reason: "all SBC replications failed".into() });
    }
    let band = calibrate_ecdf_band(
        normalized_ranks.len(),
        config.n_draws + 1,
        config.seed ^ 0xbad,
    )?;
    let passed = !ecdf_outside_band(&normalized_ranks, &band, normalized_ranks.len());
    Ok(SbcReport {
        schema_version: 1,
        normalized_ranks,
        n_requested: replications,
        n_failed,
        selected_sizes,
        band,
        passed,
    })
}

/// Public wrapper used by tests and the CLI verdict.
pub fn ranks_pass_band(ranks: &[f64], band: &EcdfBand) -> bool {
    !ecdf_outside_band(ranks, band, ranks.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_corr(x: &DMatrix<f64>, a: usize, b: usize) -> f64 {
        let n = x.nrows() as f64;
        let (ma, mb) = (x.column(a).sum() / n, x.column(b).sum() / n);
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..x.nrows() {
            let da = x[(i, a)] - ma;
            let db = x[(i, b)] - mb;
            cov += da * db;
            va += da * da;
            vb += db * db;
        }
        cov / (va * vb).sqrt()
    }

    #[test]
    fn block_defaults_shape_and_sparsity() {
        let (ds, truth) = generate_block_correlated(&DgpConfig::block_correlated()).unwrap();
        assert_eq!(ds.n(), 500);
        assert_eq!(ds.p(), 100);
        assert_eq!(truth.weights.iter().filter(|&&w| w != 0.0).count(), 15);
        assert_eq!(truth.relevant, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn block_correlation_structure() {
        let (ds, _) = generate_block_correlated(&DgpConfig::block_correlated()).unwrap();
        // within-block pairs ~0.9
        let within = sample_corr(&ds.x, 0, 3);
        assert!((within - 0.9).abs() < 0.05, "within = {within}");
        let within2 = sample_corr(&ds.x, 20, 24);
        assert!((within2 - 0.9).abs() < 0.05, "within2 = {within2}");
        // cross-block pairs ~0
        let cross = sample_corr(&ds.x, 0, 7);
        assert!(cross.abs() < 0.1, "cross = {cross}");
    }

    #[test]
    fn block_rejects_bad_p() {
        let mut cfg = DgpConfig::block_correlated();
        cfg.p = 101;
        assert!(generate_block_correlated(&cfg).is_err());
    }

    #[test]
    fn weakly_relevant_hits_target_r_squared() {
        let cfg = DgpConfig::weakly_relevant();
        let (ds, truth) = generate_weakly_relevant(&cfg).unwrap();
        assert_eq!(ds.p(), 50);
        assert_relative_eq!(truth.population_r_squared, 0.5, epsilon = 1e-10);
        // recompute wᵀRw from scratch as an oracle
        let a = truth.weights[0];
        let p = 50f64;
        let quad = a * a * (p + 0.1 * p * (p - 1.0));
        assert_relative_eq!(quad / (quad + 1.0), 0.5, epsilon = 1e-10);
    }

    #[test]
    fn weakly_relevant_rho_zero_independent() {
        let mut cfg = DgpConfig::weakly_relevant();
        cfg.rho = 0.0;
        cfg.n = 2000;
        let (ds, truth) = generate_weakly_relevant(&cfg).unwrap();
        assert!(sample_corr(&ds.x, 0, 1).abs() < 0.08);
        assert_relative_eq!(truth.population_r_squared, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn dgps_deterministic_under_seed() {
        let cfg = DgpConfig::block_correlated();
        let (a, _) = generate_block_correlated(&cfg).unwrap();
        let (b, _) = generate_block_correlated(&cfg).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn dispersion_never_shrinks_in_demo() {
        let report = run_dispersion_demo(4).unwrap();
        assert_eq!(report.sigma_reference.len(), report.sigma_projected.len());
        for (r, p) in report.sigma_reference.iter().zip(&report.sigma_projected) {
            assert!(p >= r, "projected {p} < reference {r}");
        }
        assert_eq!(report.n, 100);
        assert_eq!(report.p, 95);
        assert_eq!(report.n_relevant, 15);
    }

    #[test]
    fn projection_concentrates_relevant_coefficients() {
        // majority criterion over seeds: projected marginal sds of the
        // first two (relevant) coefficients at most the reference sds
        let mut wins = 0;
        let total = 6;
        for seed in 0..total {
            let r = run_dispersion_demo(seed).unwrap();
            if r.beta1_projected.1 <= r.beta1_reference.1
                && r.beta2_projected.1 <= r.beta2_reference.1
            {
                wins += 1;
            }
        }
        assert!(wins * 2 > total, "wins = {wins}/{total}");
    }

    #[test]
    fn binomial_helpers_match_direct_sums() {
        // pmf sums to one
        let total: f64 = (0..=20).map(|k| binomial_log_pmf(k, 20, 0.3).exp()).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-10);
        // cdf midpoint of symmetric binomial
        assert_relative_eq!(binomial_cdf(10, 21, 0.5), 0.5, epsilon = 1e-10);
        // quantile inverts cdf
        for &q in &[0.025, 0.5, 0.975] {
            let k = binomial_quantile(q, 50, 0.4);
            assert!(binomial_cdf(k, 50, 0.4) >= q - 1e-9);
            if k > 0 {
                assert!(binomial_cdf(k - 1, 50, 0.4) < q);
            }
        }
    }

    #[test]
    fn band_calibration_null_coverage() {
        // the band itself: uniform rank sets must pass ≥93% of the time
        let n_ranks = 100;
        let support = 201;
        let band = calibrate_ecdf_band(n_ranks, support, 9).unwrap();
        assert!(band.gamma > 0.0 && band.gamma <= 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let trials = 400;
        let mut passes = 0;
        for _ in 0..trials {
            let ranks: Vec<f64> = (0..n_ranks)
                .map(|_| rng.gen_range(0..support) as f64 / (support - 1) as f64)
                .collect();
            if ranks_pass_band(&ranks, &band) {
                passes += 1;
            }
        }
        let rate = passes as f64 / trials as f64;
        assert!(rate >= 0.93, "pass rate = {rate}");
        // and it must reject a grossly non-uniform set
        let clumped: Vec<f64> = (0..n_ranks).map(|i| 0.4 + 0.2 * (i as f64 / 100.0)).collect();
        assert!(!ranks_pass_band(&clumped, &band));
    }

    #[test]
    fn sbc_requires_minimum_replications() {
        assert!(run_sbc(10, &SbcConfig::desk_scale(1)).is_err());
    }

    #[test]
    fn sbc_counts_and_forcing() {
        let mut cfg = SbcConfig::desk_scale(5);
        cfg.n = 40;
        cfg.p = 4;
        cfg.k_folds = 3;
        cfg.n_draws = 80;
        cfg.clusters_c = 4;
        let report = run_sbc(50, &cfg).unwrap();
        assert_eq!(report.normalized_ranks.len() + report.n_failed, 50);
        // forced treatment: every selected size is at least 1
        assert!(report.selected_sizes.iter().all(|&s| s >= 1));
        assert!(report.normalized_ranks.iter().all(|&r| (0.0..=1.0).contains(&r)));
    }
}
