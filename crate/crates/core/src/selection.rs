//! Submodel-size selection rules, monotone smoothing of elpd curves,
//! and predictor substitutability (distance matrix + dendrogram).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::PathEvaluation;
use crate::model::{mean_from_eta, Dataset, PosteriorDraws, Submodel};
use crate::projection::project_single;
use crate::reference::cluster_draws;

pub const DEFAULT_DELTA_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    Se,
    DeltaUtility,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionReport {
    pub selected_size: usize,
    pub rule: SelectionRule,
    pub smoothed: bool,
    /// Smoothed Δelpd on the normalized (per-SE) scale, full length.
    pub smoothed_normalized: Vec<f64>,
    /// Smoothed Δelpd mapped back to the elpd scale.
    pub smoothed_elpd: Vec<f64>,
    pub fallback_used: bool,
}

fn scan_smallest(sizes: &[usize], ok: impl Fn(usize) -> bool) -> (usize, bool) {
    for (idx, &size) in sizes.iter().enumerate() {
        if ok(idx) {
            return (size, false);
        }
    }
    (*sizes.last().expect("non-empty sizes"), true)
}

/// SE rule: smallest size whose utility is within one standard error of
/// the reference, i.e. Δelpd_k + s_k ≥ 0. Falls back to the largest
/// size when never satisfied.
pub fn select_size_se(eval: &PathEvaluation) -> (usize, bool) {
    scan_smallest(&eval.sizes, |k| eval.delta_elpd[k] + eval.se_delta[k] >= 0.0)
}

/// Δutility rule (default): smallest size with Δelpd_k ≥ −threshold.
pub fn select_size_delta(eval: &PathEvaluation, threshold: f64) -> (usize, bool) {
    scan_smallest(&eval.sizes, |k| eval.delta_elpd[k] >= -threshold)
}

/// Pool-adjacent-violators: weighted L2 projection onto the
/// non-decreasing cone.
pub fn pava_non_decreasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // blocks of (weighted mean, weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() >= 2 {
            let (m2, w2, l2) = blocks[blocks.len() - 1];
            let (m1, w1, l1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            blocks.pop();
            blocks.push(((m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, l1 + l2));
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (m, _, l) in blocks {
        out.extend(std::iter::repeat(m).take(l));
    }
    out
}

/// Isotonic smoothing of the Δelpd curve on the normalized scale
/// (Δelpd_k / s_k), mapped back by multiplying with s_k. The first
/// `drop_prefix + 1` sizes (intercept-only by default) are excluded
/// from the fit and passed through raw. Fewer than 3 remaining points:
/// identity pass-through.
pub fn smooth_monotone(eval: &PathEvaluation, drop_prefix: usize) -> (Vec<f64>, Vec<f64>) {
    let m = eval.sizes.len();
    let start = (drop_prefix + 1).min(m);
    let norm: Vec<f64> = (0..m)
        .map(|k| {
            let s = eval.se_delta[k];
            if s > 0.0 { eval.delta_elpd[k] / s } else { eval.delta_elpd[k] }
        })
        .collect();
    if m - start < 3 {
        log::warn!("fewer than 3 sizes to smooth; returning raw curve");
        return (norm.clone(), eval.delta_elpd.clone());
    }
    let weights = vec![1.0; m - start];
    let fitted = pava_non_decreasing(&norm[start..], &weights);
    let mut smoothed_norm = norm;
    smoothed_norm[start..].copy_from_slice(&fitted);
    let smoothed_elpd: Vec<f64> = (0..m)
        .map(|k| {
            let s = eval.se_delta[k];
            if s > 0.0 { smoothed_norm[k] * s } else { smoothed_norm[k] }
        })
        .collect();
    (smoothed_norm, smoothed_elpd)
}

/// Applies a rule, optionally on the isotonically smoothed curve.
pub fn build_report(
    eval: &PathEvaluation,
    rule: SelectionRule,
    smooth: bool,
    delta_threshold: f64,
) -> SelectionReport {
    let (smoothed_normalized, smoothed_elpd) = smooth_monotone(eval, 0);
    let curve: &[f64] = if smooth { &smoothed_elpd } else { &eval.delta_elpd };
    let (selected_size, fallback_used) = match rule {
        SelectionRule::Se => {
            scan_smallest(&eval.sizes, |k| curve[k] + eval.se_delta[k] >= 0.0)
        }
        SelectionRule::DeltaUtility => {
            scan_smallest(&eval.sizes, |k| curve[k] >= -delta_threshold)
        }
    };
    SelectionReport {
        selected_size,
        rule,
        smoothed: smooth,
        smoothed_normalized,
        smoothed_elpd,
        fallback_used,
    }
}

fn pearson(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = a[i] - ma;
        let db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// In-sample predictive means of every single-predictor submodel under
/// the single-point (C = 1) projection; rows indexed by predictor.
pub fn single_predictor_predictions(
    dataset: &Dataset,
    ref_draws: &PosteriorDraws,
) -> Result<DMatrix<f64>> {
    let single = cluster_draws(ref_draws, dataset, 1, 0)?;
    let ref_mu = single.fitted_means.row(0).transpose();
    let ref_sigma = single.dispersion.as_ref().map(|d| d[0]);
    let p = dataset.p();
    let n = dataset.n();
    let rows: Vec<Result<DVector<f64>>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let sub = Submodel::new(vec![j], p)?;
            let (coef, _, _) = project_single(dataset, &sub, &ref_mu, ref_sigma)?;
            let eta = DVector::from_fn(n, |i, _| coef[0] + coef[1] * dataset.x[(i, j)]);
            Ok(mean_from_eta(dataset.family, &eta))
        })
        .collect();
    let mut out = DMatrix::zeros(p, n);
    for (j, row) in rows.into_iter().enumerate() {
        out.set_row(j, &row?.transpose());
    }
    Ok(out)
}

/// dist(j, j′) = 1 − |corr| of the single-predictor predictive means;
/// zero-variance predictions give distance 1 (no shared signal).
pub fn predictor_distance(dataset: &Dataset, ref_draws: &PosteriorDraws, j: usize, j_prime: usize) -> Result<f64> {
    let p = dataset.p();
    if j >= p || j_prime >= p {
        return Err(Error::InvalidArgument(format!("predictor index out of range (p = {p})")));
    }
    if j == j_prime {
        return Ok(0.0);
    }
    let preds = single_predictor_predictions(dataset, ref_draws)?;
    Ok(distance_from_predictions(&preds, j, j_prime))
}

fn distance_from_predictions(preds: &DMatrix<f64>, j: usize, j_prime: usize) -> f64 {
    if j == j_prime {
        return 0.0;
    }
    let a = preds.row(j).transpose();
    let b = preds.row(j_prime).transpose();
    match pearson(&a, &b) {
        Some(c) => (1.0 - c.abs()).clamp(0.0, 1.0),
        None => {
            log::warn!("zero-variance prediction for predictor {j} or {j_prime}; distance set to 1");
            1.0
        }
    }
}

/// Full p×p distance matrix (symmetric, zero diagonal).
pub fn distance_matrix(dataset: &Dataset, ref_draws: &PosteriorDraws) -> Result<DMatrix<f64>> {
    let preds = single_predictor_predictions(dataset, ref_draws)?;
    let p = dataset.p();
    let mut d = DMatrix::zeros(p, p);
    for j in 0..p {
        for jp in (j + 1)..p {
            let v = distance_from_predictions(&preds, j, jp);
            d[(j, jp)] = v;
            d[(jp, j)] = v;
        }
    }
    Ok(d)
}

/// Nested merge tree from complete-linkage agglomerative clustering.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Dendrogram {
    Leaf { index: usize, name: String },
    Merge { height: f64, children: Vec<Dendrogram> },
}

impl Dendrogram {
    pub fn height(&self) -> f64 {
        match self {
            Dendrogram::Leaf { .. } => 0.0,
            Dendrogram::Merge { height, .. } => *height,
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        match self {
            Dendrogram::Leaf { index, .. } => vec![*index],
            Dendrogram::Merge { children, .. } => {
                children.iter().flat_map(|c| c.leaves()).collect()
            }
        }
    }
}

pub fn build_dendrogram(distance: &DMatrix<f64>, names: &[String]) -> Result<Dendrogram> {
    let p = distance.nrows();
    if p == 0 || distance.ncols() != p {
        return Err(Error::InvalidArgument("distance matrix must be square and non-empty".into()));
    }
    if names.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "{} names for {p} predictors",
            names.len()
        )));
    }
    let mut clusters: Vec<(Dendrogram, Vec<usize>)> = (0..p)
        .map(|j| {
            (
                Dendrogram::Leaf { index: j, name: names[j].clone() },
                vec![j],
            )
        })
        .collect();
    while clusters.len() > 1 {
        let mut best = (0usize, 1usize, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                // complete linkage: max pairwise distance between members
                let mut link = 0.0f64;
                for &i in &clusters[a].1 {
                    for &j in &clusters[b].1 {
                        link = link.max(distance[(i, j)]);
                    }
                }
                if link < best.2 {
                    best = (a, b, link);
                }
            }
        }
        let (a, b, height) = best;
        let (right, mut right_members) = clusters.swap_remove(b);
        let (left, mut left_members) = clusters.swap_remove(if a == clusters.len() { b } else { a });
        left_members.append(&mut right_members);
        clusters.push((
            Dendrogram::Merge { height, children: vec![left, right] },
            left_members,
        ));
    }
    Ok(clusters.pop().unwrap().0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{EvaluationScheme, PsisDiagnostics, KHAT_THRESHOLD};
    use crate::model::Family;
    use crate::reference::{fit_conjugate_gaussian, ConjugatePrior};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn eval_from(deltas: &[f64], ses: &[f64]) -> PathEvaluation {
        PathEvaluation {
            sizes: (0..deltas.len()).collect(),
            pointwise_utilities: vec![Vec::new(); deltas.len()],
            reference_pointwise: Vec::new(),
            delta_elpd: deltas.to_vec(),
            se_delta: ses.to_vec(),
            elpd: deltas.to_vec(),
            reference_elpd: 0.0,
            scheme: EvaluationScheme::FullDataPsisLoo,
            diagnostics: PsisDiagnostics {
                khat_per_observation: Vec::new(),
                threshold: KHAT_THRESHOLD,
            },
        }
    }

    #[test]
    fn se_rule_boundary_arithmetic() {
        // u_* = -100, u_k = -100.5, s = 1.0: -100 <= -99.5 holds
        let eval = eval_from(&[-0.5], &[1.0]);
        assert_eq!(select_size_se(&eval), (0, false));
        // u_k = -102: -100 <= -101 fails; fallback to last size
        let eval = eval_from(&[-2.0], &[1.0]);
        assert_eq!(select_size_se(&eval), (0, true));
    }

    #[test]
    fn se_rule_crossing_at_seven() {
        let deltas: Vec<f64> = (0..10).map(|k| k as f64 - 8.0).collect(); // crosses -1 at k=7
        let ses = vec![1.0; 10];
        let eval = eval_from(&deltas, &ses);
        // direct scan oracle
        let oracle = deltas
            .iter()
            .zip(&ses)
            .position(|(d, s)| d + s >= 0.0)
            .unwrap();
        assert_eq!(oracle, 7);
        assert_eq!(select_size_se(&eval), (7, false));
    }

    #[test]
    fn delta_rule_threshold() {
        let eval = eval_from(&[-3.9], &[1.0]);
        assert_eq!(select_size_delta(&eval, 4.0), (0, false));
        let eval = eval_from(&[-4.1], &[1.0]);
        assert_eq!(select_size_delta(&eval, 4.0), (0, true));
        let eval = eval_from(&[-9.0, -8.0, -7.0], &[1.0; 3]);
        assert_eq!(select_size_delta(&eval, 4.0), (2, true));
    }

    #[test]
    fn delta_rule_invariant_to_common_shift() {
        // the rule depends only on differences, which a common shift of
        // û_k and û_* leaves unchanged by construction of delta_elpd
        let eval = eval_from(&[-5.0, -3.0, -1.0], &[1.0; 3]);
        assert_eq!(select_size_delta(&eval, 4.0).0, 1);
    }

    #[test]
    fn pava_hand_computation() {
        let fitted = pava_non_decreasing(&[-10.0, -2.0, -5.0, -1.0], &[1.0; 4]);
        assert_eq!(fitted, vec![-10.0, -3.5, -3.5, -1.0]);
    }

    #[test]
    fn pava_monotone_input_is_fixed_point() {
        let v = [-7.0, -3.0, -3.0, -1.0, 0.0];
        let fitted = pava_non_decreasing(&v, &[1.0; 5]);
        for (a, b) in v.iter().zip(&fitted) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn pava_is_l2_projection() {
        // independent oracle: repeated-averaging PAVA until stable
        fn naive_pava(v: &[f64]) -> Vec<f64> {
            let mut out = v.to_vec();
            let mut weights = vec![1.0f64; v.len()];
            loop {
                let mut violated = false;
                let mut merged_v = Vec::new();
                let mut merged_w = Vec::new();
                for i in 0..out.len() {
                    merged_v.push(out[i]);
                    merged_w.push(weights[i]);
                    while merged_v.len() >= 2
                        && merged_v[merged_v.len() - 2] > merged_v[merged_v.len() - 1]
                    {
                        violated = true;
                        let v2 = merged_v.pop().unwrap();
                        let w2 = merged_w.pop().unwrap();
                        let v1 = merged_v.pop().unwrap();
                        let w1 = merged_w.pop().unwrap();
                        merged_v.push((v1 * w1 + v2 * w2) / (w1 + w2));
                        merged_w.push(w1 + w2);
                    }
                }
                out = merged_v;
                weights = merged_w;
                if !violated {
                    break;
                }
            }
            // expand back by weight counts
            let mut full = Vec::new();
            for (val, w) in out.iter().zip(&weights) {
                for _ in 0..(*w as usize) {
                    full.push(*val);
                }
            }
            full
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v: Vec<f64> = (0..12)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * 3.0
                })
                .collect();
            let a = pava_non_decreasing(&v, &vec![1.0; 12]);
            let b = naive_pava(&v);
            for (x, y) in a.iter().zip(&b) {
                assert_relative_eq!(x, y, epsilon = 1e-10);
            }
            for w in a.windows(2) {
                assert!(w[1] >= w[0] - 1e-12);
            }
        }
    }

    #[test]
    fn smooth_drops_prefix_but_keeps_it_raw() {
        let eval = eval_from(&[99.0, -10.0, -2.0, -5.0, -1.0], &[1.0; 5]);
        let (norm, elpd) = smooth_monotone(&eval, 0);
        assert_eq!(norm[0], 99.0); // raw pass-through
        assert_eq!(&elpd[1..], &[-10.0, -3.5, -3.5, -1.0]);
    }

    #[test]
    fn smooth_too_few_points_passthrough() {
        let eval = eval_from(&[-3.0, -1.0, -2.0], &[1.0; 3]);
        let (_, elpd) = smooth_monotone(&eval, 0);
        assert_eq!(elpd, vec![-3.0, -1.0, -2.0]);
    }

    #[test]
    fn smoothing_preserves_selection_on_monotone_curves() {
        let eval = eval_from(&[-20.0, -9.0, -5.0, -3.0, -0.5], &[1.0; 5]);
        let raw = build_report(&eval, SelectionRule::DeltaUtility, false, 4.0);
        let smoothed = build_report(&eval, SelectionRule::DeltaUtility, true, 4.0);
        assert_eq!(raw.selected_size, smoothed.selected_size);
        assert_eq!(raw.selected_size, 3);
    }

    fn noise_dataset(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = nalgebra::DMatrix::from_fn(n, p, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[(i, 0)] + 0.5 * e
        });
        Dataset::new(x, y, (1..=p).map(|j| format!("x{j}")).collect(), Family::Gaussian).unwrap()
    }

    #[test]
    fn distance_axioms_and_anticorrelation() {
        let base = noise_dataset(200, 3, 5);
        // make x2 = -x0 (anti-correlated), x1 independent noise
        let mut x = base.x.clone();
        for i in 0..200 {
            x[(i, 2)] = -x[(i, 0)];
        }
        let ds = Dataset::new(x, base.y.clone(), base.predictor_names.clone(), Family::Gaussian)
            .unwrap();
        let draws = fit_conjugate_gaussian(&ds, &ConjugatePrior::default(), 100, 1).unwrap();
        let d = distance_matrix(&ds, &draws).unwrap();
        for j in 0..3 {
            assert_eq!(d[(j, j)], 0.0);
            for jp in 0..3 {
                assert!((0.0..=1.0).contains(&d[(j, jp)]));
                assert_relative_eq!(d[(j, jp)], d[(jp, j)]);
            }
        }
        // perfect anti-correlation collapses to distance 0
        assert!(d[(0, 2)] < 1e-10, "d = {}", d[(0, 2)]);
        // independent noise predictor: near 1 at this n
        assert!(d[(0, 1)] > 0.7, "d = {}", d[(0, 1)]);
        assert_relative_eq!(
            predictor_distance(&ds, &draws, 0, 2).unwrap(),
            d[(0, 2)],
            epsilon = 1e-12
        );
        assert_eq!(predictor_distance(&ds, &draws, 1, 1).unwrap(), 0.0);
    }

    #[test]
    fn zero_variance_prediction_gives_distance_one() {
        let base = noise_dataset(50, 2, 6);
        let mut x = base.x.clone();
        for i in 0..50 {
            x[(i, 1)] = 2.5; // constant predictor
        }
        let ds = Dataset::new(x, base.y.clone(), base.predictor_names.clone(), Family::Gaussian)
            .unwrap();
        let draws = fit_conjugate_gaussian(&ds, &ConjugatePrior::default(), 50, 2).unwrap();
        let d = distance_matrix(&ds, &draws).unwrap();
        assert_eq!(d[(0, 1)], 1.0);
    }

    #[test]
    fn dendrogram_blocks_merge_internally_first() {
        // two blocks {0,1} and {2,3}: within 0.1, across 0.9
        let mut dist = DMatrix::from_element(4, 4, 0.9);
        for j in 0..4 {
            dist[(j, j)] = 0.0;
        }
        dist[(0, 1)] = 0.1;
        dist[(1, 0)] = 0.1;
        dist[(2, 3)] = 0.1;
        dist[(3, 2)] = 0.1;
        let names: Vec<String> = (1..=4).map(|j| format!("x{j}")).collect();
        let tree = build_dendrogram(&dist, &names).unwrap();
        let Dendrogram::Merge { height, children } = &tree else {
            panic!("expected a merge at the root");
        };
        assert_relative_eq!(*height, 0.9);
        let mut blocks: Vec<Vec<usize>> = children
            .iter()
            .map(|c| {
                let mut l = c.leaves();
                l.sort();
                l
            })
            .collect();
        blocks.sort();
        assert_eq!(blocks, vec![vec![0, 1], vec![2, 3]]);
        // heights non-decreasing along every root-to-leaf path
        for c in children {
            assert!(c.height() <= *height);
        }
    }

    #[test]
    fn dendrogram_single_predictor_trivial() {
        let dist = DMatrix::zeros(1, 1);
        let tree = build_dendrogram(&dist, &["x1".to_string()]).unwrap();
        assert!(matches!(tree, Dendrogram::Leaf { index: 0, .. }));
    }

    #[test]
    fn dendrogram_exhaustive_linkage_check_p4() {
        // random symmetric distances; verify the first merge is the
        // global minimum pair and heights are monotone
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut dist = DMatrix::zeros(4, 4);
        for j in 0..4 {
            for jp in (j + 1)..4 {
                let u: f64 = rand::Rng::gen_range(&mut rng, 0.05..1.0);
                dist[(j, jp)] = u;
                dist[(jp, j)] = u;
            }
        }
        let names: Vec<String> = (1..=4).map(|j| format!("x{j}")).collect();
        let tree = build_dendrogram(&dist, &names).unwrap();
        // find the smallest off-diagonal distance
        let mut min_pair = (0, 1);
        for j in 0..4 {
            for jp in (j + 1)..4 {
                if dist[(j, jp)] < dist[(min_pair.0, min_pair.1)] {
                    min_pair = (j, jp);
                }
            }
        }
        // the minimal pair must appear together in some subtree of size 2
        fn find_pairs(t: &Dendrogram, out: &mut Vec<Vec<usize>>) {
            if let Dendrogram::Merge { children, .. } = t {
                let leaves = t.leaves();
                if leaves.len() == 2 {
                    let mut l = leaves;
                    l.sort();
                    out.push(l);
                }
                for c in children {
                    find_pairs(c, out);
                }
            }
        }
        let mut pairs = Vec::new();
        find_pairs(&tree, &mut pairs);
        assert!(pairs.contains(&vec![min_pair.0, min_pair.1]), "{pairs:?}");
        fn check_heights(t: &Dendrogram) {
            if let Dendrogram::Merge { height, children } = t {
                for c in children {
                    assert!(c.height() <= *height + 1e-12);
                    check_heights(c);
                }
            }
        }
        check_heights(&tree);
    }
}
