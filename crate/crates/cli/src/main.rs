//! `projsel`: projection predictive model selection for GLMs.
//!
//! Workflow: simulate → search → eval → select, plus distance (predictor
//! substitutability) and sbc (pipeline calibration). State is passed
//! between commands via files; all randomness flows from --seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use projsel_core::evaluation::{
    detect_bulge, estimate_costs, evaluate_path_fulldata, kfold_cv_with_search, CvConfig,
    PathEvaluation, DEFAULT_EVAL_DRAWS,
};
use projsel_core::experiments::{
    generate_block_correlated, generate_weakly_relevant, run_dispersion_demo, run_sbc, DgpConfig,
    DgpKind, SbcConfig,
};
use projsel_core::model::{Dataset, Family, PosteriorDraws, Submodel};
use projsel_core::projection::project_drawwise;
use projsel_core::reference::{cluster_draws, fit_conjugate_gaussian, ConjugatePrior};
use projsel_core::search::{forward_search, l1_search, SearchConfig, SearchMethod};
use projsel_core::selection::{
    build_dendrogram, build_report, distance_matrix, SelectionRule, DEFAULT_DELTA_THRESHOLD,
};
use projsel_core::Error;

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "projsel", about = "Projection predictive model selection for GLMs", version)]
struct Cli {
    /// JSON config file; command-line flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root random seed; all stage sub-seeds derive from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-thread cap for parallel loops (default: all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (default: current directory)
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a study dataset and conjugate reference draws
    Simulate(SimulateArgs),
    /// Run a solution-path search on data + reference draws
    Search(SearchArgs),
    /// Evaluate a solution path (PSIS-LOO or K-fold CV with search)
    Eval(EvalArgs),
    /// Select a submodel size and write its final projection
    Select(SelectArgs),
    /// Predictor distance matrix and dendrogram
    Distance(DistanceArgs),
    /// Simulation-based calibration of the full pipeline
    Sbc(SbcArgs),
}

#[derive(Args, Default)]
struct SimulateArgs {
    /// DGP: block-correlated | weakly-relevant | overfit-demo
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    r_squared: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Posterior draw count for the conjugate reference fit
    #[arg(long)]
    n_draws: Option<usize>,
    #[arg(long)]
    ridge_scale: Option<f64>,
}

#[derive(Args, Default)]
struct SearchArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    draws: Option<PathBuf>,
    /// gaussian | bernoulli | poisson
    #[arg(long)]
    family: Option<String>,
    /// forward | l1
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    p_max: Option<usize>,
    /// Cluster count C for the search-resolution projection
    #[arg(long)]
    clusters: Option<usize>,
    /// Predictor indices (0-based) forced to the front of the order
    #[arg(long, value_delimiter = ',')]
    forced: Option<Vec<usize>>,
}

#[derive(Args, Default)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    draws: Option<PathBuf>,
    #[arg(long)]
    family: Option<String>,
    /// path.json from `projsel search`
    #[arg(long)]
    path: Option<PathBuf>,
    /// Include the search inside cross-validation (K-fold)
    #[arg(long)]
    cv_search: bool,
    #[arg(long)]
    folds: Option<usize>,
    /// Thinned draw count C' for evaluation-resolution projection
    #[arg(long)]
    eval_draws: Option<usize>,
    #[arg(long)]
    ridge_scale: Option<f64>,
    /// Truncate the CV search at this size (e.g. a bulge argmax)
    #[arg(long)]
    truncate_at: Option<usize>,
}

#[derive(Args, Default)]
struct SelectArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    draws: Option<PathBuf>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    path: Option<PathBuf>,
    /// eval.json from `projsel eval`
    #[arg(long)]
    eval: Option<PathBuf>,
    /// se | delta
    #[arg(long)]
    rule: Option<String>,
    /// Select on the isotonically smoothed curve
    #[arg(long)]
    smooth: bool,
    #[arg(long)]
    delta_threshold: Option<f64>,
}

#[derive(Args, Default)]
struct DistanceArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    draws: Option<PathBuf>,
    #[arg(long)]
    family: Option<String>,
}

#[derive(Args, Default)]
struct SbcArgs {
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    n_draws: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Fitting-prior ridge-scale multiplier (1 = calibrated)
    #[arg(long)]
    fit_prior_inflation: Option<f64>,
}

/// File-backed configuration; every field can be overridden by a flag.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: Option<u64>,
    jobs: Option<usize>,
    out_dir: Option<PathBuf>,
    dgp: Option<String>,
    n: Option<usize>,
    p: Option<usize>,
    rho: Option<f64>,
    r_squared: Option<f64>,
    xi: Option<f64>,
    sigma2: Option<f64>,
    n_draws: Option<usize>,
    ridge_scale: Option<f64>,
    data: Option<PathBuf>,
    draws: Option<PathBuf>,
    family: Option<String>,
    method: Option<String>,
    p_max: Option<usize>,
    clusters: Option<usize>,
    forced: Option<Vec<usize>>,
    path: Option<PathBuf>,
    eval: Option<PathBuf>,
    cv_search: Option<bool>,
    folds: Option<usize>,
    eval_draws: Option<usize>,
    truncate_at: Option<usize>,
    rule: Option<String>,
    smooth: Option<bool>,
    delta_threshold: Option<f64>,
    replications: Option<usize>,
    fit_prior_inflation: Option<f64>,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    schema_version: u32,
    kind: &'a str,
    message: String,
}

fn error_kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::DimensionMismatch(_)
        | Error::InvalidData(_)
        | Error::InvalidArgument(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => ("validation", 2),
        Error::SingularDesign(_)
        | Error::IrlsNonConvergence { .. }
        | Error::DrawProjection { .. }
        | Error::EmptyCluster { .. }
        | Error::SearchFailure { .. } => ("numerical", 3),
    }
}

fn fail(e: Error) -> ExitCode {
    let (kind, code) = error_kind(&e);
    let report = ErrorReport { schema_version: SCHEMA_VERSION, kind, message: e.to_string() };
    eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let file: FileConfig = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(c) => c,
            Err(e) => return fail(e),
        },
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    if let Some(jobs) = cli.jobs.or(file.jobs) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            return fail(Error::InvalidArgument(format!("cannot set --jobs: {e}")));
        }
    }
    let out_dir = cli.out_dir.clone().or(file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    if let Err(e) = fs::create_dir_all(&out_dir) {
        return fail(Error::Io(e));
    }
    let result = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args, &file, seed, &out_dir),
        Command::Search(args) => cmd_search(args, &file, seed, &out_dir),
        Command::Eval(args) => cmd_eval(args, &file, seed, &out_dir),
        Command::Select(args) => cmd_select(args, &file, seed, &out_dir),
        Command::Distance(args) => cmd_distance(args, &file, &out_dir),
        Command::Sbc(args) => cmd_sbc(args, &file, seed, &out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn load_config(path: &Path) -> Result<FileConfig, Error> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn parse_family(name: Option<&String>) -> Result<Family, Error> {
    match name {
        None => Ok(Family::Gaussian),
        Some(s) => Family::parse(s),
    }
}

fn load_inputs(
    data: Option<&PathBuf>,
    draws: Option<&PathBuf>,
    family: Family,
) -> Result<(Dataset, PosteriorDraws), Error> {
    let data = data.ok_or_else(|| Error::InvalidArgument("--data is required".into()))?;
    let draws = draws.ok_or_else(|| Error::InvalidArgument("--draws is required".into()))?;
    projsel_core::reference::ingest_draws(draws, data, family)
}

// --- simulate ---

#[derive(Serialize)]
struct TruthFile<'a> {
    schema_version: u32,
    dgp: &'a str,
    seed: u64,
    truth: Option<&'a projsel_core::experiments::DgpTruth>,
}

fn cmd_simulate(args: &SimulateArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<(), Error> {
    let dgp_name = args
        .dgp
        .clone()
        .or(file.dgp.clone())
        .unwrap_or_else(|| "block-correlated".to_string());
    if dgp_name == "overfit-demo" {
        let report = run_dispersion_demo(seed)?;
        write_json(&out.join("dispersion.json"), &report)?;
        println!("wrote {}", out.join("dispersion.json").display());
        return Ok(());
    }
    let kind = match dgp_name.as_str() {
        "block-correlated" => DgpKind::BlockCorrelated,
        "weakly-relevant" => DgpKind::WeaklyRelevant,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown dgp '{other}' (expected block-correlated, weakly-relevant, or overfit-demo)"
            )))
        }
    };
    let mut config = match kind {
        DgpKind::BlockCorrelated => DgpConfig::block_correlated(),
        _ => DgpConfig::weakly_relevant(),
    };
    config.seed = seed;
    if let Some(n) = args.n.or(file.n) {
        config.n = n;
    }
    if let Some(p) = args.p.or(file.p) {
        config.p = p;
    }
    if let Some(rho) = args.rho.or(file.rho) {
        config.rho = rho;
    }
    if let Some(r2) = args.r_squared.or(file.r_squared) {
        config.r_squared = r2;
    }
    if let Some(xi) = args.xi.or(file.xi) {
        config.xi = xi;
    }
    if let Some(s2) = args.sigma2.or(file.sigma2) {
        config.sigma2 = s2;
    }
    let (dataset, truth) = match kind {
        DgpKind::BlockCorrelated => generate_block_correlated(&config)?,
        _ => generate_weakly_relevant(&config)?,
    };
    let n_draws = args.n_draws.or(file.n_draws).unwrap_or(1000);
    let prior = ConjugatePrior {
        ridge_scale: args.ridge_scale.or(file.ridge_scale).unwrap_or(1.0),
        ..ConjugatePrior::default()
    };
    let draws = fit_conjugate_gaussian(&dataset, &prior, n_draws, seed ^ 0xd0a)?;
    dataset.write_csv(&out.join("data.csv"))?;
    draws.write_csv(&out.join("draws.csv"))?;
    write_json(
        &out.join("truth.json"),
        &TruthFile { schema_version: SCHEMA_VERSION, dgp: &dgp_name, seed, truth: Some(&truth) },
    )?;
    println!(
        "wrote data.csv ({} rows, {} predictors), draws.csv ({} draws), truth.json",
        dataset.n(),
        dataset.p(),
        draws.n_draws()
    );
    Ok(())
}

// --- search ---

#[derive(Serialize, Deserialize)]
struct PathFile {
    schema_version: u32,
    method: SearchMethod,
    order: Vec<usize>,
    order_names: Vec<String>,
    kl_at_size: Vec<f64>,
    projection_count: usize,
    clusters: usize,
    /// Measured mean seconds per projection during the search.
    t_proj_seconds: f64,
    seed: u64,
}

fn parse_method(name: Option<&String>) -> Result<SearchMethod, Error> {
    match name.map(String::as_str) {
        None | Some("forward") => Ok(SearchMethod::Forward),
        Some("l1") => Ok(SearchMethod::L1),
        Some(other) => Err(Error::InvalidArgument(format!(
            "unknown method '{other}' (expected forward or l1)"
        ))),
    }
}

fn cmd_search(args: &SearchArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<(), Error> {
    let family = parse_family(args.family.as_ref().or(file.family.as_ref()))?;
    let (dataset, draws) =
        load_inputs(args.data.as_ref().or(file.data.as_ref()), args.draws.as_ref().or(file.draws.as_ref()), family)?;
    let method = parse_method(args.method.as_ref().or(file.method.as_ref()))?;
    let p = dataset.p();
    let p_max = args.p_max.or(file.p_max).unwrap_or(p).min(p);
    let clusters_c = args.clusters.or(file.clusters).unwrap_or(20);
    let mut config = match method {
        SearchMethod::Forward => SearchConfig::forward(p_max, clusters_c, seed),
        SearchMethod::L1 => SearchConfig::l1(p_max, seed),
    };
    if let Some(forced) = args.forced.clone().or(file.forced.clone()) {
        config.forced = forced;
    }
    let start = Instant::now();
    let path = match method {
        SearchMethod::Forward => {
            let clusters = cluster_draws(&draws, &dataset, clusters_c.min(draws.n_draws()), seed)?;
            forward_search(&dataset, &clusters, &config)?
        }
        SearchMethod::L1 => {
            let single = cluster_draws(&draws, &dataset, 1, seed)?;
            let ref_mu = single.fitted_means.row(0).transpose();
            let sigma = single.dispersion.as_ref().map(|d| d[0]);
            l1_search(&dataset, &ref_mu, sigma, &config)?
        }
    };
    let elapsed = start.elapsed().as_secs_f64();
    let t_proj = elapsed / path.projection_count.max(1) as f64;
    let path_file = PathFile {
        schema_version: SCHEMA_VERSION,
        method,
        order_names: path.order.iter().map(|&j| dataset.predictor_names[j].clone()).collect(),
        order: path.order.clone(),
        kl_at_size: path.kl_at_size.clone(),
        projection_count: path.projection_count,
        clusters: clusters_c,
        t_proj_seconds: t_proj,
        seed,
    };
    write_json(&out.join("path.json"), &path_file)?;
    println!(
        "search done: {} projections in {elapsed:.2} s (t_proj = {t_proj:.3e} s); order length {}",
        path.projection_count,
        path.order.len()
    );
    Ok(())
}

fn read_path(path: Option<&PathBuf>) -> Result<PathFile, Error> {
    let path = path.ok_or_else(|| Error::InvalidArgument("--path is required".into()))?;
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// --- eval ---

fn write_eval_csv(path: &Path, eval: &PathEvaluation) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["size", "delta_elpd", "se", "elpd", "khat_bad_count"])?;
    let bad = eval.diagnostics.n_flagged();
    for (idx, &size) in eval.sizes.iter().enumerate() {
        w.write_record([
            size.to_string(),
            format!("{:.17e}", eval.delta_elpd[idx]),
            format!("{:.17e}", eval.se_delta[idx]),
            format!("{:.17e}", eval.elpd[idx]),
            bad.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Io(e))?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<(), Error> {
    let family = parse_family(args.family.as_ref().or(file.family.as_ref()))?;
    let (dataset, draws) =
        load_inputs(args.data.as_ref().or(file.data.as_ref()), args.draws.as_ref().or(file.draws.as_ref()), family)?;
    let eval_draws = args.eval_draws.or(file.eval_draws).unwrap_or(DEFAULT_EVAL_DRAWS);
    let cv_search = args.cv_search || file.cv_search.unwrap_or(false);
    let eval = if cv_search {
        let folds = args.folds.or(file.folds).unwrap_or(10);
        if family != Family::Gaussian {
            return Err(Error::InvalidArgument(
                "CV-with-search refits the conjugate reference, which requires the Gaussian family"
                    .into(),
            ));
        }
        let path_file = read_path(args.path.as_ref().or(file.path.as_ref()))?;
        let p_max = args
            .truncate_at
            .or(file.truncate_at)
            .unwrap_or(path_file.order.len())
            .min(dataset.p());
        let mut search = match path_file.method {
            SearchMethod::Forward => SearchConfig::forward(p_max, path_file.clusters, seed),
            SearchMethod::L1 => SearchConfig::l1(p_max, seed),
        };
        search.clusters_c = path_file.clusters;
        let prior = ConjugatePrior {
            ridge_scale: args.ridge_scale.or(file.ridge_scale).unwrap_or(1.0),
            ..ConjugatePrior::default()
        };
        let n_draws = draws.n_draws();
        let refit = |train: &Dataset, s: u64| fit_conjugate_gaussian(train, &prior, n_draws, s);
        let mut cv = CvConfig::new(folds, search, seed);
        cv.eval_draws = eval_draws;
        let start = Instant::now();
        let (eval, fold_paths) = kfold_cv_with_search(&dataset, &cv, &refit)?;
        let elapsed = start.elapsed().as_secs_f64();
        println!(
            "CV-with-search done: K = {}, {} fold paths, {elapsed:.1} s",
            folds,
            fold_paths.len()
        );
        eval
    } else {
        let path_file = read_path(args.path.as_ref().or(file.path.as_ref()))?;
        let path = rebuild_path(&path_file, dataset.p())?;
        let start = Instant::now();
        let eval = evaluate_path_fulldata(&path, &dataset, &draws, eval_draws, seed)?;
        let elapsed = start.elapsed().as_secs_f64();
        println!("full-data PSIS-LOO done in {elapsed:.1} s");
        let t_proj = path_file.t_proj_seconds;
        match detect_bulge(&eval) {
            Some(size) => {
                let costs = estimate_costs(
                    10,
                    path.order.len(),
                    path_file.clusters,
                    eval_draws,
                    t_proj,
                );
                println!(
                    "bulge detected: over-optimistic elpd along the full-data path; \
                     re-run with --cv-search --truncate-at {size} \
                     (estimated serial cost at K=10: search {:.1} s + eval {:.1} s = {:.1} s)",
                    costs.t_search, costs.t_eval, costs.t_total
                );
            }
            None => println!("no bulge: full-data path accepted"),
        }
        eval
    };
    write_eval_csv(&out.join("eval.csv"), &eval)?;
    write_json(&out.join("eval.json"), &eval)?;
    println!("wrote eval.csv, eval.json");
    Ok(())
}

/// Reconstructs a scored SolutionPath handle from a stored order.
fn rebuild_path(
    path_file: &PathFile,
    p: usize,
) -> Result<projsel_core::search::SolutionPath, Error> {
    for &j in &path_file.order {
        if j >= p {
            return Err(Error::InvalidArgument(format!("path index {j} out of range for p = {p}")));
        }
    }
    Ok(projsel_core::search::SolutionPath {
        order: path_file.order.clone(),
        kl_at_size: path_file.kl_at_size.clone(),
        method: path_file.method,
        projections: Vec::new(),
        projection_count: path_file.projection_count,
    })
}

// --- select ---

#[derive(Serialize)]
struct SelectionFile<'a> {
    schema_version: u32,
    report: &'a projsel_core::selection::SelectionReport,
    selected_predictors: Vec<String>,
    delta_elpd_at_selected: f64,
    se_at_selected: f64,
}

fn cmd_select(args: &SelectArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<(), Error> {
    let family = parse_family(args.family.as_ref().or(file.family.as_ref()))?;
    let (dataset, draws) =
        load_inputs(args.data.as_ref().or(file.data.as_ref()), args.draws.as_ref().or(file.draws.as_ref()), family)?;
    let path_file = read_path(args.path.as_ref().or(file.path.as_ref()))?;
    let eval_path = args
        .eval
        .as_ref()
        .or(file.eval.as_ref())
        .ok_or_else(|| Error::InvalidArgument("--eval is required".into()))?;
    let eval: PathEvaluation = serde_json::from_str(&fs::read_to_string(eval_path)?)?;
    let rule = match args.rule.as_ref().or(file.rule.as_ref()).map(String::as_str) {
        None | Some("delta") => SelectionRule::DeltaUtility,
        Some("se") => SelectionRule::Se,
        Some(other) => {
            return Err(Error::InvalidArgument(format!(
                "unknown rule '{other}' (expected se or delta)"
            )))
        }
    };
    let smooth = args.smooth || file.smooth.unwrap_or(false);
    let threshold = args
        .delta_threshold
        .or(file.delta_threshold)
        .unwrap_or(DEFAULT_DELTA_THRESHOLD);
    let report = build_report(&eval, rule, smooth, threshold);
    let size = report.selected_size.min(path_file.order.len());
    let selected: Vec<usize> = path_file.order[..size].to_vec();
    // final projection at full draw resolution
    let sub = Submodel::new(selected.clone(), dataset.p())?;
    let projected = project_drawwise(&dataset, &sub, &draws)?;
    write_projection_csv(&out.join("projection.csv"), &projected, &dataset, seed)?;
    let idx = eval.sizes.iter().position(|&s| s == size).unwrap_or(eval.sizes.len() - 1);
    let selection = SelectionFile {
        schema_version: SCHEMA_VERSION,
        report: &report,
        selected_predictors: selected
            .iter()
            .map(|&j| dataset.predictor_names[j].clone())
            .collect(),
        delta_elpd_at_selected: eval.delta_elpd[idx],
        se_at_selected: eval.se_delta[idx],
    };
    write_json(&out.join("selection.json"), &selection)?;
    println!(
        "selected size {} ({:?} rule{}); predictors: [{}]; wrote selection.json, projection.csv",
        size,
        rule,
        if report.fallback_used { ", fallback" } else { "" },
        selection.selected_predictors.join(", ")
    );
    Ok(())
}

fn write_projection_csv(
    path: &Path,
    projected: &projsel_core::projection::ProjectedPosterior,
    dataset: &Dataset,
    _seed: u64,
) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["weight".to_string(), "b0".to_string()];
    for &j in projected.submodel.indices() {
        header.push(dataset.predictor_names[j].clone());
    }
    if projected.dispersion.is_some() {
        header.push("sigma".to_string());
    }
    w.write_record(&header)?;
    let c = projected.coefficients.nrows();
    for comp in 0..c {
        let mut row = vec![format!("{:.17e}", projected.weights[comp])];
        for col in 0..projected.coefficients.ncols() {
            row.push(format!("{:.17e}", projected.coefficients[(comp, col)]));
        }
        if let Some(d) = &projected.dispersion {
            row.push(format!("{:.17e}", d[comp]));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

// --- distance ---

fn cmd_distance(args: &DistanceArgs, file: &FileConfig, out: &Path) -> Result<(), Error> {
    let family = parse_family(args.family.as_ref().or(file.family.as_ref()))?;
    let (dataset, draws) =
        load_inputs(args.data.as_ref().or(file.data.as_ref()), args.draws.as_ref().or(file.draws.as_ref()), family)?;
    let dist = distance_matrix(&dataset, &draws)?;
    let p = dataset.p();
    let mut w = csv::Writer::from_path(out.join("distance.csv"))?;
    let mut header = vec!["predictor".to_string()];
    header.extend(dataset.predictor_names.iter().cloned());
    w.write_record(&header)?;
    for j in 0..p {
        let mut row = vec![dataset.predictor_names[j].clone()];
        for jp in 0..p {
            row.push(format!("{:.17e}", dist[(j, jp)]));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::Io)?;
    let tree = build_dendrogram(&dist, &dataset.predictor_names)?;
    #[derive(Serialize)]
    struct DendrogramFile<'a> {
        schema_version: u32,
        dendrogram: &'a projsel_core::selection::Dendrogram,
    }
    write_json(
        &out.join("dendrogram.json"),
        &DendrogramFile { schema_version: SCHEMA_VERSION, dendrogram: &tree },
    )?;
    println!("wrote distance.csv, dendrogram.json");
    Ok(())
}

// --- sbc ---

fn cmd_sbc(args: &SbcArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<(), Error> {
    let mut config = SbcConfig::desk_scale(seed);
    if let Some(n) = args.n.or(file.n) {
        config.n = n;
    }
    if let Some(p) = args.p.or(file.p) {
        config.p = p;
    }
    if let Some(k) = args.folds.or(file.folds) {
        config.k_folds = k;
    }
    if let Some(s) = args.n_draws.or(file.n_draws) {
        config.n_draws = s;
    }
    if let Some(c) = args.clusters.or(file.clusters) {
        config.clusters_c = c;
    }
    if let Some(f) = args.fit_prior_inflation.or(file.fit_prior_inflation) {
        config.fit_prior_inflation = f;
    }
    let replications = args.replications.or(file.replications).unwrap_or(200);
    let report = run_sbc(replications, &config)?;
    let mut w = csv::Writer::from_path(out.join("sbc_ranks.csv"))?;
    w.write_record(["replication", "normalized_rank", "selected_size"])?;
    for (i, (&r, &s)) in report.normalized_ranks.iter().zip(&report.selected_sizes).enumerate() {
        w.write_record([i.to_string(), format!("{r:.17e}"), s.to_string()])?;
    }
    w.flush().map_err(Error::Io)?;
    write_json(&out.join("sbc_verdict.json"), &report)?;
    println!(
        "SBC: {}/{} replications succeeded; band {}",
        report.normalized_ranks.len(),
        report.n_requested,
        if report.passed { "PASSED" } else { "FAILED" }
    );
    Ok(())
}
