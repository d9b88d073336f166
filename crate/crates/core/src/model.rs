//! Domain types shared by the whole pipeline: datasets, observation
//! families, posterior draws, submodels, and pointwise log-densities.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear predictors are clamped to this range before exp/logistic to
/// avoid overflow; saturates probabilities at ~6e-16.
pub const ETA_CLAMP: f64 = 35.0;

/// Bernoulli means are kept inside (0, 1) by this margin before logs.
pub const MEAN_EPS: f64 = 1e-12;

/// Observation family with its canonical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Identity link, Gaussian noise with dispersion sigma.
    Gaussian,
    /// Logit link, responses in {0, 1}.
    Bernoulli,
    /// Log link, non-negative integer responses.
    Poisson,
}

impl Family {
    pub fn has_dispersion(self) -> bool {
        matches!(self, Family::Gaussian)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "bernoulli" | "binomial" => Ok(Family::Bernoulli),
            "poisson" => Ok(Family::Poisson),
            other => Err(Error::InvalidArgument(format!("unknown family '{other}'"))),
        }
    }
}

/// Design matrix, response vector, and family; everything downstream
/// conditions on one of these.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub predictor_names: Vec<String>,
    pub family: Family,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        predictor_names: Vec<String>,
        family: Family,
    ) -> Result<Dataset> {
        let (n, p) = (x.nrows(), x.ncols());
        if n == 0 || p == 0 {
            return Err(Error::InvalidData("need n >= 1 and p >= 1".into()));
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "y has {} entries but X has {} rows",
                y.len(),
                n
            )));
        }
        if predictor_names.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "{} predictor names for {} columns",
                predictor_names.len(),
                p
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite entry in data".into()));
        }
        match family {
            Family::Bernoulli => {
                if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidData("Bernoulli responses must be 0 or 1".into()));
                }
            }
            Family::Poisson => {
                if y.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
                    return Err(Error::InvalidData(
                        "Poisson responses must be non-negative integers".into(),
                    ));
                }
            }
            Family::Gaussian => {}
        }
        Ok(Dataset { x, y, predictor_names, family })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Reads `y,x1,...,xp` (any predictor names) from a CSV file.
    pub fn read_csv(path: &Path, family: Family) -> Result<Dataset> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.is_empty() || headers.get(0) != Some("y") {
            return Err(Error::InvalidData("first CSV column must be 'y'".into()));
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
        let p = names.len();
        let mut ys = Vec::new();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != p + 1 {
                return Err(Error::InvalidData(format!(
                    "row has {} fields, expected {}",
                    record.len(),
                    p + 1
                )));
            }
            let mut fields = record.iter().map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidData(format!("cannot parse '{f}' as a number")))
            });
            ys.push(fields.next().unwrap()?);
            for field in fields {
                rows.push(field?);
            }
        }
        let n = ys.len();
        if n == 0 {
            return Err(Error::InvalidData("empty data file".into()));
        }
        let x = DMatrix::from_row_slice(n, p, &rows);
        Dataset::new(x, DVector::from_vec(ys), names, family)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec!["y".to_string()];
        header.extend(self.predictor_names.iter().cloned());
        writer.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![format!("{:.17e}", self.y[i])];
            for j in 0..self.p() {
                row.push(format!("{:.17e}", self.x[(i, j)]));
            }
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// S posterior draws of the reference model's intercept, coefficients,
/// and (for Gaussian) dispersion, with per-draw weights.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    /// S x (p+1); column 0 is the intercept.
    pub coefficients: DMatrix<f64>,
    /// sigma per draw, Gaussian only.
    pub dispersion: Option<DVector<f64>>,
    /// Non-negative, sums to 1; uniform for raw MCMC draws.
    pub draw_weights: DVector<f64>,
}

impl PosteriorDraws {
    pub fn new(
        coefficients: DMatrix<f64>,
        dispersion: Option<DVector<f64>>,
        draw_weights: Option<DVector<f64>>,
    ) -> Result<PosteriorDraws> {
        let s = coefficients.nrows();
        if s == 0 {
            return Err(Error::InvalidData("need at least one draw".into()));
        }
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite coefficient draw".into()));
        }
        if let Some(d) = &dispersion {
            if d.len() != s {
                return Err(Error::DimensionMismatch(format!(
                    "{} dispersion entries for {} draws",
                    d.len(),
                    s
                )));
            }
            if d.iter().any(|&v| !v.is_finite() || v <= 0.0) {
                return Err(Error::InvalidData("dispersion draws must be positive".into()));
            }
        }
        let draw_weights = match draw_weights {
            Some(w) => {
                if w.len() != s {
                    return Err(Error::DimensionMismatch(format!(
                        "{} weights for {} draws",
                        w.len(),
                        s
                    )));
                }
                if w.iter().any(|&v| v < 0.0) {
                    return Err(Error::InvalidData("negative draw weight".into()));
                }
                if (w.sum() - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidData("draw weights must sum to 1".into()));
                }
                w
            }
            None => DVector::from_element(s, 1.0 / s as f64),
        };
        Ok(PosteriorDraws { coefficients, dispersion, draw_weights })
    }

    pub fn n_draws(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn n_predictors(&self) -> usize {
        self.coefficients.ncols() - 1
    }

    /// Reads `b0,b1,...,bp[,sigma]`, one row per draw.
    pub fn read_csv(path: &Path, family: Family) -> Result<PosteriorDraws> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let has_sigma = headers.iter().last() == Some("sigma");
        if family.has_dispersion() && !has_sigma {
            return Err(Error::InvalidData(
                "Gaussian draws require a trailing 'sigma' column".into(),
            ));
        }
        let n_coef = headers.len() - usize::from(has_sigma);
        if n_coef < 1 {
            return Err(Error::InvalidData("draws file needs at least column b0".into()));
        }
        let mut coefs = Vec::new();
        let mut sigmas = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != headers.len() {
                return Err(Error::InvalidData("ragged draws file".into()));
            }
            for (idx, field) in record.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidData(format!("cannot parse '{field}'")))?;
                if idx < n_coef {
                    coefs.push(v);
                } else {
                    sigmas.push(v);
                }
            }
        }
        let s = coefs.len() / n_coef;
        if s == 0 {
            return Err(Error::InvalidData("empty draws file".into()));
        }
        let coefficients = DMatrix::from_row_slice(s, n_coef, &coefs);
        let dispersion = has_sigma.then(|| DVector::from_vec(sigmas));
        PosteriorDraws::new(coefficients, dispersion, None)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.coefficients.ncols()).map(|j| format!("b{j}")).collect();
        if self.dispersion.is_some() {
            header.push("sigma".into());
        }
        writer.write_record(&header)?;
        for s in 0..self.n_draws() {
            let mut row: Vec<String> =
                (0..self.coefficients.ncols()).map(|j| format!("{:.17e}", self.coefficients[(s, j)])).collect();
            if let Some(d) = &self.dispersion {
                row.push(format!("{:.17e}", d[s]));
            }
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Ordered predictor subset; the intercept is always present implicitly
/// and never counted in the size k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Submodel {
    predictor_indices: Vec<usize>,
}

impl Submodel {
    pub fn new(predictor_indices: Vec<usize>, p: usize) -> Result<Submodel> {
        let mut seen = vec![false; p];
        for &j in &predictor_indices {
            if j >= p {
                return Err(Error::InvalidArgument(format!(
                    "predictor index {j} out of range for p = {p}"
                )));
            }
            if seen[j] {
                return Err(Error::InvalidArgument(format!("duplicate predictor index {j}")));
            }
            seen[j] = true;
        }
        Ok(Submodel { predictor_indices })
    }

    pub fn empty() -> Submodel {
        Submodel { predictor_indices: Vec::new() }
    }

    pub fn full(p: usize) -> Submodel {
        Submodel { predictor_indices: (0..p).collect() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.predictor_indices
    }

    pub fn size(&self) -> usize {
        self.predictor_indices.len()
    }

    /// n x (k+1) design with a leading ones column.
    pub fn design(&self, dataset: &Dataset) -> DMatrix<f64> {
        let n = dataset.n();
        let k = self.size();
        let mut design = DMatrix::zeros(n, k + 1);
        design.column_mut(0).fill(1.0);
        for (slot, &j) in self.predictor_indices.iter().enumerate() {
            design.set_column(slot + 1, &dataset.x.column(j));
        }
        design
    }
}

/// eta_i = c_0 + sum over submodel predictors of x_ij c_j.
pub fn linear_predictor(
    dataset: &Dataset,
    submodel: &Submodel,
    coefficients: &DVector<f64>,
) -> Result<DVector<f64>> {
    let k = submodel.size();
    if coefficients.len() != k + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficients for submodel of size {k}",
            coefficients.len()
        )));
    }
    let mut eta = DVector::from_element(dataset.n(), coefficients[0]);
    for (slot, &j) in submodel.indices().iter().enumerate() {
        let c = coefficients[slot + 1];
        eta.axpy(c, &dataset.x.column(j).clone_owned(), 1.0);
    }
    Ok(eta)
}

/// Canonical inverse link, with eta clamped to +-ETA_CLAMP for
/// logit/log.
pub fn mean_from_eta(family: Family, eta: &DVector<f64>) -> DVector<f64> {
    match family {
        Family::Gaussian => eta.clone(),
        Family::Bernoulli => eta.map(|e| {
            let e = e.clamp(-ETA_CLAMP, ETA_CLAMP);
            1.0 / (1.0 + (-e).exp())
        }),
        Family::Poisson => eta.map(|e| e.clamp(-ETA_CLAMP, ETA_CLAMP).exp()),
    }
}

pub fn mean_from_eta_scalar(family: Family, eta: f64) -> f64 {
    match family {
        Family::Gaussian => eta,
        Family::Bernoulli => {
            let e = eta.clamp(-ETA_CLAMP, ETA_CLAMP);
            1.0 / (1.0 + (-e).exp())
        }
        Family::Poisson => eta.clamp(-ETA_CLAMP, ETA_CLAMP).exp(),
    }
}

const LN_2PI: f64 = 1.8378770664093453;

/// Exact log-density of one observation given its mean (and dispersion
/// for Gaussian).
pub fn log_density(family: Family, y: f64, mu: f64, dispersion: Option<f64>) -> Result<f64> {
    match family {
        Family::Gaussian => {
            let sigma = dispersion.ok_or_else(|| {
                Error::InvalidArgument("Gaussian log-density requires a dispersion".into())
            })?;
            if sigma <= 0.0 {
                return Err(Error::InvalidArgument("dispersion must be positive".into()));
            }
            let z = (y - mu) / sigma;
            Ok(-0.5 * LN_2PI - sigma.ln() - 0.5 * z * z)
        }
        Family::Bernoulli => {
            let mu = mu.clamp(MEAN_EPS, 1.0 - MEAN_EPS);
            Ok(if y == 1.0 { mu.ln() } else { (1.0 - mu).ln() })
        }
        Family::Poisson => {
            if mu <= 0.0 {
                return Err(Error::InvalidArgument(format!("Poisson mean {mu} must be positive")));
            }
            Ok(y * mu.ln() - mu - ln_gamma(y + 1.0))
        }
    }
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-13 for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * LN_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// log(sum exp(v)) without overflow.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}
