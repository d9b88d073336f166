//! Pareto-smoothed importance sampling: generalized Pareto tail fit on
//! the largest importance ratios, with the fitted quantiles replacing
//! the raw tail.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::log_sum_exp;

/// Minimum draw count for tail smoothing; below this the raw ratios are
/// kept and khat is reported as +inf (unreliable).
pub const MIN_TAIL_DRAWS: usize = 25;

/// Profile-likelihood fit of the generalized Pareto distribution to
/// exceedances, following Zhang & Stephens (2009). Returns (khat, sigma).
pub fn gpd_fit(exceedances: &[f64]) -> Result<(f64, f64)> {
    let m = exceedances.len();
    if m < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 exceedances for a GPD fit, got {m}"
        )));
    }
    let mut x: Vec<f64> = exceedances.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if x[0] < 0.0 || !x.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument(
            "exceedances must be finite and non-negative".into(),
        ));
    }
    let n = m as f64;
    let x_max = x[m - 1];
    if x_max <= 0.0 {
        return Err(Error::InvalidArgument("all exceedances are zero".into()));
    }
    // profile likelihood over theta = -k / sigma, on the Zhang-Stephens grid
    let grid_m = 30 + (n.sqrt().floor() as usize);
    let quart_idx = ((n / 4.0 + 0.5).floor() as usize).clamp(1, m) - 1;
    let x_star = x[quart_idx];
    let theta: Vec<f64> = (1..=grid_m)
        .map(|j| {
            1.0 / x_max + (1.0 - ((grid_m as f64) / (j as f64 - 0.5)).sqrt()) / (3.0 * x_star)
        })
        .collect();
    let profile_loglik = |t: f64| -> f64 {
        let k = -x.iter().map(|&v| (1.0 - t * v).ln()).sum::<f64>() / n;
        n * ((t / k).ln() + k - 1.0)
    };
    let logliks: Vec<f64> = theta.iter().map(|&t| profile_loglik(t)).collect();
    // quadrature weights proportional to the profile likelihood
    let max_ll = logliks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logliks.iter().map(|&l| (l - max_ll).exp()).collect();
    let w_sum: f64 = weights.iter().sum();
    let theta_hat: f64 = theta
        .iter()
        .zip(&weights)
        .map(|(&t, &w)| t * w)
        .sum::<f64>()
        / w_sum;
    // reported khat uses the opposite sign convention from the profile
    let khat = x.iter().map(|&v| (1.0 - theta_hat * v).ln()).sum::<f64>() / n;
    let sigma = -khat / theta_hat;
    Ok((khat, sigma))
}

/// GPD quantile function with location 0.
fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (1.0 - p).ln()
    } else {
        sigma * ((1.0 - p).powf(-k) - 1.0) / k
    }
}

/// Pareto-smooth a vector of log importance ratios in place and return
/// (smoothed log ratios, khat). khat carries sentinels: +inf when there
/// are too few draws to fit a tail, -inf when the tail is degenerate
/// (all equal). The smoothed tail is truncated at the raw maximum, and
/// khat includes the sample-size prior regularization toward 0.5.
pub fn pareto_smooth(log_ratios: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let s = log_ratios.len();
    if s == 0 {
        return Err(Error::InvalidArgument("no importance ratios".into()));
    }
    if !log_ratios.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidData(
            "importance ratios must be finite".into(),
        ));
    }
    if s < MIN_TAIL_DRAWS {
        return Ok((log_ratios.clone(), f64::INFINITY));
    }
    let sf = s as f64;
    let tail_m = ((0.2 * sf).min(3.0 * sf.sqrt()).ceil() as usize).min(s - 1);
    if tail_m < 5 {
        return Ok((log_ratios.clone(), f64::INFINITY));
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| log_ratios[a].partial_cmp(&log_ratios[b]).unwrap());
    let cutoff_log = log_ratios[order[s - tail_m - 1]];
    let max_log = log_ratios[order[s - 1]];
    // work on the shifted scale exp(lr - max) for stability
    let cutoff = (cutoff_log - max_log).exp();
    let exceed: Vec<f64> = order[s - tail_m..]
        .iter()
        .map(|&i| (log_ratios[i] - max_log).exp() - cutoff)
        .collect();
    if exceed.iter().all(|&v| v <= 0.0) {
        // tail is constant: nothing to smooth
        return Ok((log_ratios.clone(), f64::NEG_INFINITY));
    }
    let (khat_raw, sigma) = gpd_fit(&exceed)?;
    // regularize khat toward 0.5 with a prior worth 10 observations
    let mf = tail_m as f64;
    let khat = (mf * khat_raw + 10.0 * 0.5) / (mf + 10.0);
    let mut smoothed = log_ratios.clone();
    if khat_raw.is_finite() && sigma > 0.0 {
        for (rank, &i) in order[s - tail_m..].iter().enumerate() {
            let p = (rank as f64 + 0.5) / mf;
            let q = cutoff + gpd_quantile(p, khat_raw, sigma);
            // truncate at the raw maximum ratio
            let q = q.min(1.0).max(f64::MIN_POSITIVE);
            smoothed[i] = max_log + q.ln();
        }
    }
    Ok((smoothed, khat))
}

/// Normalize log weights to sum to one in the linear domain; returns
/// log of the normalized weights.
pub fn normalize_log_weights(log_weights: &DVector<f64>) -> DVector<f64> {
    let lse = log_sum_exp(log_weights.as_slice());
    log_weights.map(|v| v - lse)
}
