//! Dataset valuation methods behind one result type.
//!
//! Alignment scores and KMM work directly on a [`GradientSet`]. DataModel
//! regressions and the GradEx selection loops only need a utility oracle over
//! subsets, supplied as a [`SubsetEvaluator`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gram::{
    apply_curvature, compute_gram, compute_gram_curved, compute_gram_normalized, cosine_scores,
    CurvatureSpec, GramSystem,
};
use crate::solver::{residual_norm, solve_constrained, solve_penalized, SolveConfig, SolveReport};
use crate::store::{GradientSet, RepresentationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    OneStep,
    TaskVector,
    OneStepKmm,
    TaskVectorKmm,
    DatamodelUniform,
    DatamodelCs,
    GradexFs,
    GradexRe,
    Random,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::OneStep => "one_step",
            Method::TaskVector => "task_vector",
            Method::OneStepKmm => "one_step_kmm",
            Method::TaskVectorKmm => "task_vector_kmm",
            Method::DatamodelUniform => "datamodel_uniform",
            Method::DatamodelCs => "datamodel_cs",
            Method::GradexFs => "gradex_fs",
            Method::GradexRe => "gradex_re",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub rows: usize,
    /// Numerical rank of the design matrix.
    pub rank: usize,
    pub residual_norm: f64,
    pub solve: SolveReport,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostics {
    None,
    Solver(SolveReport),
    Regression(RegressionFit),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValuationResult {
    pub names: Vec<String>,
    pub scores: Vec<f64>,
    pub method: Method,
    pub hyperparams: BTreeMap<String, String>,
    pub diagnostics: Diagnostics,
}

impl ValuationResult {
    fn new(names: Vec<String>, scores: Vec<f64>, method: Method) -> Result<Self> {
        if names.len() != scores.len() {
            return Err(Error::Shape("names and scores differ in length".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!(
                "{method} produced a non-finite score"
            )));
        }
        Ok(Self {
            names,
            scores,
            method,
            hyperparams: BTreeMap::new(),
            diagnostics: Diagnostics::None,
        })
    }

    fn param(mut self, key: &str, value: impl ToString) -> Self {
        self.hyperparams.insert(key.to_owned(), value.to_string());
        self
    }

    /// Replaces positional names (`dataset_i`) with real ones.
    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.scores.len() {
            return Err(Error::Shape("name count differs from score count".into()));
        }
        self.names = names;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn solve_report(&self) -> Option<&SolveReport> {
        match &self.diagnostics {
            Diagnostics::Solver(r) => Some(r),
            Diagnostics::Regression(fit) => Some(&fit.solve),
            Diagnostics::None => None,
        }
    }
}

fn positional_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("dataset_{i}")).collect()
}

type UtilityFn<'a> = Box<dyn Fn(&[usize]) -> f64 + Send + Sync + 'a>;

/// Utility oracle over subsets of dataset indices.
///
/// Subsets are passed as sorted index slices. Deterministic evaluators may be
/// called concurrently; others are always called in a fixed sequential order.
pub struct SubsetEvaluator<'a> {
    f: UtilityFn<'a>,
    calls: AtomicUsize,
    deterministic: bool,
}

impl<'a> SubsetEvaluator<'a> {
    pub fn new(f: impl Fn(&[usize]) -> f64 + Send + Sync + 'a) -> Self {
        Self {
            f: Box::new(f),
            calls: AtomicUsize::new(0),
            deterministic: true,
        }
    }

    /// An evaluator whose value may change between calls (e.g. noisy).
    pub fn nondeterministic(f: impl Fn(&[usize]) -> f64 + Send + Sync + 'a) -> Self {
        Self {
            deterministic: false,
            ..Self::new(f)
        }
    }

    pub fn evaluate(&self, subset: &[usize]) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.f)(subset)
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    /// Evaluates every subset; results keep the input order.
    pub fn evaluate_all(&self, subsets: &[Vec<usize>]) -> Vec<f64> {
        if self.deterministic {
            subsets.par_iter().map(|s| self.evaluate(s)).collect()
        } else {
            subsets.iter().map(|s| self.evaluate(s)).collect()
        }
    }
}

/// Additive utility `sum_{i in S} values[i]`.
pub fn additive_evaluator(values: Vec<f64>) -> SubsetEvaluator<'static> {
    SubsetEvaluator::new(move |s| s.iter().map(|&i| values[i]).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignKind {
    UniformBinary,
    CompressedSensing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n: usize,
    rows: Vec<f64>,
    responses: Vec<f64>,
    kind: DesignKind,
}

impl DesignMatrix {
    pub fn new(
        n: usize,
        rows: Vec<Vec<f64>>,
        responses: Vec<f64>,
        kind: DesignKind,
    ) -> Result<Self> {
        if rows.len() != responses.len() || rows.is_empty() {
            return Err(Error::Shape(format!(
                "{} design rows, {} responses",
                rows.len(),
                responses.len()
            )));
        }
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("design rows must have {n} entries")));
        }
        Ok(Self {
            n,
            rows: rows.concat(),
            responses,
            kind,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.responses.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.rows[r * self.n..(r + 1) * self.n]
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn kind(&self) -> DesignKind {
        self.kind
    }
}

fn subset_size(n: usize, rho: f64) -> Result<usize> {
    if !(rho > 0.0 && rho < 1.0 || rho == 1.0) {
        return Err(Error::Validation(format!(
            "rho must lie in (0, 1], got {rho}"
        )));
    }
    let size = (rho * n as f64).round() as usize;
    if size == 0 {
        return Err(Error::Validation(format!(
            "round(rho * n) is 0 for rho={rho}, n={n}"
        )));
    }
    Ok(size.min(n))
}

fn sample_subsets(n: usize, size: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..count)
        .map(|_| {
            let mut s = index::sample(rng, n, size).into_vec();
            s.sort_unstable();
            s
        })
        .collect()
}

/// Rows are indicators of uniformly drawn subsets of size `round(rho n)`.
pub fn build_uniform_design(
    n: usize,
    m_rows: usize,
    rho: f64,
    evaluator: &SubsetEvaluator,
    seed: u64,
) -> Result<DesignMatrix> {
    let size = subset_size(n, rho)?;
    if m_rows == 0 {
        return Err(Error::Validation("design needs at least one row".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subsets = sample_subsets(n, size, m_rows, &mut rng);
    let responses = evaluator.evaluate_all(&subsets);
    let rows = subsets
        .iter()
        .map(|s| {
            let mut row = vec![0.0; n];
            s.iter().for_each(|&i| row[i] = 1.0);
            row
        })
        .collect();
    DesignMatrix::new(n, rows, responses, DesignKind::UniformBinary)
}

/// Sparse random-sign design with entries `c * xi`, `c = sqrt(3/n)`,
/// `xi` in {+1, 0, -1} w.p. (1/6, 2/3, 1/6). Each measurement is realized as
/// `c * (u(S+) - u(S-))` where `S+` holds the indices with `xi >= 0` and `S-`
/// those with `xi <= 0`.
pub fn build_cs_design(
    n: usize,
    m_rows: usize,
    evaluator: &SubsetEvaluator,
    seed: u64,
) -> Result<DesignMatrix> {
    if n == 0 || m_rows == 0 {
        return Err(Error::Validation(
            "design needs n >= 1 and m_rows >= 1".into(),
        ));
    }
    let c = (3.0 / n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signs: Vec<Vec<i8>> = (0..m_rows)
        .map(|_| {
            (0..n)
                .map(|_| match rng.random_range(0..6u8) {
                    0 => 1,
                    5 => -1,
                    _ => 0,
                })
                .collect()
        })
        .collect();
    let subsets: Vec<Vec<usize>> = signs
        .iter()
        .flat_map(|xi| {
            let plus = (0..n).filter(|&i| xi[i] >= 0).collect();
            let minus = (0..n).filter(|&i| xi[i] <= 0).collect();
            [plus, minus]
        })
        .collect();
    let values = evaluator.evaluate_all(&subsets);
    let responses = values.chunks_exact(2).map(|p| c * (p[0] - p[1])).collect();
    let rows = signs
        .iter()
        .map(|xi| xi.iter().map(|&s| c * s as f64).collect())
        .collect();
    DesignMatrix::new(n, rows, responses, DesignKind::CompressedSensing)
}

/// LASSO fit `argmin ||Aw - y||^2 + alpha ||w||_1`, solved as the penalized
/// QP with `Q = 2A'A`, `c = 2A'y`.
pub fn fit_datamodel(
    design: &DesignMatrix,
    alpha: f64,
    cfg: &SolveConfig,
) -> Result<ValuationResult> {
    if !(alpha > 0.0) {
        return Err(Error::Validation("alpha must be > 0".into()));
    }
    let (n, m) = (design.n(), design.m());
    let mut q = vec![0.0; n * n];
    let mut c = vec![0.0; n];
    for r in 0..m {
        let row = design.row(r);
        let y = design.responses()[r];
        for i in 0..n {
            if row[i] == 0.0 {
                continue;
            }
            c[i] += 2.0 * row[i] * y;
            for j in i..n {
                q[i * n + j] += 2.0 * row[i] * row[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            q[i * n + j] = q[j * n + i];
        }
    }
    let solve = solve_penalized(&q, &c, alpha, cfg)?;
    let a = DMatrix::from_row_slice(m, n, &design.rows);
    let rank = a.clone().svd(false, false).rank(1e-10 * a.amax().max(1.0));
    let residual_norm = (0..m)
        .map(|r| {
            let fit: f64 = design
                .row(r)
                .iter()
                .zip(&solve.weights)
                .map(|(a, w)| a * w)
                .sum();
            (fit - design.responses()[r]).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let method = match design.kind() {
        DesignKind::UniformBinary => Method::DatamodelUniform,
        DesignKind::CompressedSensing => Method::DatamodelCs,
    };
    let mut result = ValuationResult::new(positional_names(n), solve.weights.clone(), method)?
        .param("alpha", alpha)
        .param("design_rows", m);
    result.diagnostics = Diagnostics::Regression(RegressionFit {
        rows: m,
        rank,
        residual_norm,
        solve,
    });
    Ok(result)
}

/// Alignment scores: raw `beta`, or cosine similarities.
pub fn score_one_step(set: &GradientSet, use_cosine: bool) -> Result<ValuationResult> {
    let scores = if use_cosine {
        cosine_scores(set)?
    } else {
        compute_gram(set).beta().to_vec()
    };
    let method = match set.kind() {
        RepresentationKind::TaskVector => Method::TaskVector,
        _ => Method::OneStep,
    };
    Ok(ValuationResult::new(set.names().to_vec(), scores, method)?.param("cosine", use_cosine))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KmmMode {
    /// `||w||_1 <= k_budget`.
    Constrained(f64),
    /// `gamma ||w||_1` penalty.
    Penalized(f64),
}

/// KMM scores on a prebuilt Gram system: solves with `Q = K`,
/// `c = lambda beta`.
pub fn solve_kmm(gram: &GramSystem, mode: KmmMode, cfg: &SolveConfig) -> Result<SolveReport> {
    let c: Vec<f64> = gram.beta().iter().map(|b| cfg.lambda * b).collect();
    match mode {
        KmmMode::Constrained(k) => solve_constrained(gram.k_matrix(), &c, k, cfg),
        KmmMode::Penalized(gamma) => solve_penalized(gram.k_matrix(), &c, gamma, cfg),
    }
}

fn kmm_result(
    source: &GradientSet,
    matched: &GradientSet,
    gram: &GramSystem,
    mode: KmmMode,
    cfg: &SolveConfig,
) -> Result<ValuationResult> {
    let mut report = solve_kmm(gram, mode, cfg)?;
    report.residual_norm = Some(residual_norm(matched, &report.weights, cfg.lambda));
    let method = match source.kind() {
        RepresentationKind::TaskVector => Method::TaskVectorKmm,
        _ => Method::OneStepKmm,
    };
    let mut result = ValuationResult::new(source.names().to_vec(), report.weights.clone(), method)?
        .param("lambda", cfg.lambda)
        .param("ridge", cfg.ridge);
    result = match mode {
        KmmMode::Constrained(k) => result.param("k_budget", k),
        KmmMode::Penalized(g) => result.param("gamma", g),
    };
    result.diagnostics = Diagnostics::Solver(report);
    Ok(result)
}

/// Kernel-mean-matching scores from raw inner products, optionally under a
/// diagonal curvature metric.
pub fn score_kmm(
    set: &GradientSet,
    mode: KmmMode,
    cfg: &SolveConfig,
    curv: Option<&CurvatureSpec>,
) -> Result<ValuationResult> {
    match curv {
        None => kmm_result(set, set, &compute_gram(set), mode, cfg),
        Some(curv) => {
            let transformed = apply_curvature(set, curv)?;
            let gram = compute_gram_curved(set, curv)?;
            kmm_result(set, &transformed, &gram, mode, cfg).map(|r| r.param("curvature", "diag"))
        }
    }
}

/// KMM on unit-normalized rows and target.
pub fn score_kmm_normalized(
    set: &GradientSet,
    mode: KmmMode,
    cfg: &SolveConfig,
) -> Result<ValuationResult> {
    let unit = set.normalized()?;
    let gram = compute_gram_normalized(set)?;
    kmm_result(set, &unit, &gram, mode, cfg).map(|r| r.param("normalized", true))
}

/// Greedy forward selection: repeatedly add the dataset whose inclusion gives
/// the highest utility, stopping once no candidate strictly improves on the
/// current subset. Ties go to the lowest index.
pub fn gradex_forward_select(n: usize, evaluator: &SubsetEvaluator) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    let mut current = evaluator.evaluate(&[]);
    loop {
        let candidates: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
        if candidates.is_empty() {
            break;
        }
        let trials: Vec<Vec<usize>> = candidates
            .iter()
            .map(|&i| {
                let mut s = chosen.clone();
                s.push(i);
                s.sort_unstable();
                s
            })
            .collect();
        let values = evaluator.evaluate_all(&trials);
        let mut best: Option<(usize, f64)> = None;
        for (&i, &v) in candidates.iter().zip(&values) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        match best {
            Some((i, v)) if v > current => {
                chosen.push(i);
                current = v;
            }
            _ => break,
        }
    }
    chosen
}

/// Per-dataset mean response over the subsets that contain it; datasets that
/// never appear receive the mean of all responses.
pub fn ensemble_scores(n: usize, subsets: &[Vec<usize>], responses: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (s, &y) in subsets.iter().zip(responses) {
        for &i in s {
            sums[i] += y;
            counts[i] += 1;
        }
    }
    let global = if responses.is_empty() {
        0.0
    } else {
        responses.iter().sum::<f64>() / responses.len() as f64
    };
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { global } else { s / c as f64 })
        .collect()
}

/// Random-ensemble scores over `m_subsets` subsets of size `round(rho n)`.
pub fn gradex_random_ensemble(
    n: usize,
    m_subsets: usize,
    rho: f64,
    evaluator: &SubsetEvaluator,
    seed: u64,
) -> Result<ValuationResult> {
    if m_subsets == 0 {
        return Err(Error::Validation("m_subsets must be >= 1".into()));
    }
    let size = subset_size(n, rho)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subsets = sample_subsets(n, size, m_subsets, &mut rng);
    let responses = evaluator.evaluate_all(&subsets);
    let scores = ensemble_scores(n, &subsets, &responses);
    Ok(
        ValuationResult::new(positional_names(n), scores, Method::GradexRe)?
            .param("m_subsets", m_subsets)
            .param("rho", rho)
            .param("seed", seed),
    )
}

/// Ranks forward-selection output as scores: the `r`-th pick scores `n - r`,
/// unselected datasets score 0.
pub fn forward_selection_scores(n: usize, order: &[usize]) -> Result<ValuationResult> {
    let mut scores = vec![0.0; n];
    for (r, &i) in order.iter().enumerate() {
        scores[i] = (n - r) as f64;
    }
    ValuationResult::new(positional_names(n), scores, Method::GradexFs)
}

/// Seeded control: scores are a uniform random permutation of `1..=N`.
pub fn score_random(names: Vec<String>, seed: u64) -> Result<ValuationResult> {
    let mut ranks: Vec<f64> = (1..=names.len()).map(|r| r as f64).collect();
    ranks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ValuationResult::new(names, ranks, Method::Random)?.param("seed", seed))
}

/// Subset surrogate `sum beta_i` or, corrected, `sum beta_i - 1/2 sum_{i,j in S} K_ij`
/// with the double sum over ordered pairs including the diagonal.
pub fn surrogate_subset_score(gram: &GramSystem, subset: &[usize], corrected: bool) -> Result<f64> {
    if let Some(&bad) = subset.iter().find(|&&i| i >= gram.n()) {
        return Err(Error::Validation(format!(
            "index {bad} out of range for N={}",
            gram.n()
        )));
    }
    let linear: f64 = subset.iter().map(|&i| gram.beta()[i]).sum();
    if !corrected {
        return Ok(linear);
    }
    let pairwise: f64 = subset
        .iter()
        .flat_map(|&i| subset.iter().map(move |&j| (i, j)))
        .map(|(i, j)| gram.k(i, j))
        .sum();
    Ok(linear - 0.5 * pairwise)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> GradientSet {
        GradientSet::new(
            vec!["g1".into(), "g2".into(), "g3".into()],
            vec![vec![1.0, 0.1], vec![1.0, 0.1], vec![0.0, 1.0]],
            vec![1.0, 1.0],
            RepresentationKind::OneStepGradient,
        )
        .unwrap()
    }

    #[test]
    fn one_step_example() {
        let r = score_one_step(&example(), false).unwrap();
        assert_eq!(r.scores, vec![1.1, 1.1, 1.0]);
        assert_eq!(r.method, Method::OneStep);
    }

    #[test]
    fn anti_aligned_scores_negative() {
        let set = GradientSet::new(
            vec!["bad".into()],
            vec![vec![-1.0, -2.0]],
            vec![1.0, 2.0],
            RepresentationKind::OneStepGradient,
        )
        .unwrap();
        assert_eq!(score_one_step(&set, false).unwrap().scores, vec![-5.0]);
    }

    #[test]
    fn cosine_on_unit_rows_matches_raw() {
        let set = GradientSet::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![1.0, 0.0],
            RepresentationKind::TaskVector,
        )
        .unwrap();
        let cos = score_one_step(&set, true).unwrap();
        assert_eq!(cos.scores, score_one_step(&set, false).unwrap().scores);
        assert_eq!(cos.method, Method::TaskVector);
    }

    #[test]
    fn kmm_worked_example() {
        let r = score_kmm(
            &example(),
            KmmMode::Constrained(1.9),
            &SolveConfig::default(),
            None,
        )
        .unwrap();
        assert!((r.scores[2] - 0.9).abs() < 1e-6);
        assert!((r.scores[0] + r.scores[1] - 1.0).abs() < 1e-6);
        assert!(r.solve_report().unwrap().residual_norm.unwrap() < 1e-6);
        assert_eq!(r.method, Method::OneStepKmm);
    }

    #[test]
    fn kmm_single_dataset_closed_form() {
        let set = GradientSet::new(
            vec!["a".into()],
            vec![vec![0.6, 0.8]],
            vec![0.6, 0.8],
            RepresentationKind::OneStepGradient,
        )
        .unwrap();
        let r = score_kmm(&set, KmmMode::Penalized(0.1), &SolveConfig::default(), None).unwrap();
        // w = (beta - gamma) / K with K = beta = |g|^2 = 1
        let k = 0.6f64 * 0.6 + 0.8 * 0.8;
        assert!((r.scores[0] - (k - 0.1) / k).abs() < 1e-12);
    }

    #[test]
    fn kmm_duplicate_matches_deduplicated() {
        let rows = vec![
            vec![1.0, 0.2, -0.3],
            vec![1.0, 0.2, -0.3],
            vec![0.1, 0.9, 0.4],
        ];
        let target = vec![0.8, 0.7, 0.1];
        let dup = GradientSet::new(
            vec!["a".into(), "a2".into(), "b".into()],
            rows.clone(),
            target.clone(),
            RepresentationKind::OneStepGradient,
        )
        .unwrap();
        let single = GradientSet::new(
            vec!["a".into(), "b".into()],
            vec![rows[0].clone(), rows[2].clone()],
            target,
            RepresentationKind::OneStepGradient,
        )
        .unwrap();
        let mode = KmmMode::Penalized(0.05);
        let cfg = SolveConfig::default();
        let d = score_kmm(&dup, mode, &cfg, None).unwrap().scores;
        let s = score_kmm(&single, mode, &cfg, None).unwrap().scores;
        assert!((d[0] + d[1] - s[0]).abs() < 1e-5, "{d:?} vs {s:?}");
        assert!((d[2] - s[1]).abs() < 1e-5);
    }

    #[test]
    fn zero_gram_reproduces_alignment_argmax() {
        let set = example();
        let gram = compute_gram(&set);
        let zero =
            GramSystem::from_parts(vec![0.0; 9], gram.beta().to_vec(), gram.names().to_vec())
                .unwrap();
        let report = solve_kmm(&zero, KmmMode::Constrained(1.0), &SolveConfig::default()).unwrap();
        // beta ties between 0 and 1, so any split across them is optimal
        let support: Vec<usize> = (0..3).filter(|&i| report.weights[i] != 0.0).collect();
        assert!(support.iter().all(|&i| i < 2), "{:?}", report.weights);
        assert!((report.weights[0] + report.weights[1] - 1.0).abs() < 1e-12);

        let distinct =
            GramSystem::from_parts(vec![0.0; 9], vec![0.4, -1.3, 1.0], gram.names().to_vec())
                .unwrap();
        let report = solve_kmm(
            &distinct,
            KmmMode::Constrained(2.0),
            &SolveConfig::default(),
        )
        .unwrap();
        assert_eq!(report.weights, vec![0.0, -2.0, 0.0]);
    }

    #[test]
    fn surrogate_example_values() {
        let gram = compute_gram(&example());
        let s = surrogate_subset_score(&gram, &[0, 2], true).unwrap();
        assert!((s - 0.995).abs() < 1e-12);
        assert_eq!(surrogate_subset_score(&gram, &[], true).unwrap(), 0.0);
        assert!((surrogate_subset_score(&gram, &[0, 2], false).unwrap() - 2.1).abs() < 1e-15);
        assert_eq!(
            surrogate_subset_score(&gram, &[3], false)
                .unwrap_err()
                .name(),
            "ValidationError"
        );
    }

    #[test]
    fn forward_select_additive() {
        let ev = additive_evaluator(vec![3.0, -1.0, 2.0]);
        assert_eq!(gradex_forward_select(3, &ev), vec![0, 2]);
    }

    #[test]
    fn forward_select_constant() {
        let ev = SubsetEvaluator::new(|_| 4.0);
        assert!(gradex_forward_select(5, &ev).is_empty());
    }

    #[test]
    fn forward_select_saturating() {
        let ev = SubsetEvaluator::new(|s| s.len().min(2) as f64);
        assert_eq!(gradex_forward_select(4, &ev), vec![0, 1]);
    }

    #[test]
    fn ensemble_direct_average() {
        let subsets = vec![vec![0], vec![1], vec![0, 1]];
        assert_eq!(
            ensemble_scores(2, &subsets, &[1.0, 0.0, 1.0]),
            vec![1.0, 0.5]
        );
        // an unseen dataset receives the global mean
        assert_eq!(ensemble_scores(3, &subsets, &[1.0, 0.0, 2.0])[2], 1.0);
    }

    #[test]
    fn ensemble_constant_evaluator() {
        let ev = SubsetEvaluator::new(|_| 2.5);
        let r = gradex_random_ensemble(6, 20, 0.5, &ev, 1).unwrap();
        assert!(r.scores.iter().all(|&s| s == 2.5));
        assert_eq!(ev.call_count(), 20);
    }

    #[test]
    fn uniform_design_rows() {
        let ev = additive_evaluator(vec![1.0; 5]);
        let full = build_uniform_design(5, 4, 1.0, &ev, 3).unwrap();
        assert!((0..4).all(|r| full.row(r).iter().all(|&x| x == 1.0)));
        let half = build_uniform_design(5, 30, 0.4, &ev, 3).unwrap();
        for r in 0..30 {
            assert_eq!(half.row(r).iter().sum::<f64>(), 2.0);
            assert_eq!(half.responses()[r], 2.0);
        }
        assert!(build_uniform_design(5, 4, 0.05, &ev, 0).is_err());
    }

    #[test]
    fn cs_design_additive_identity() {
        let values = vec![0.5, -1.0, 2.0, 0.25, 0.0, 1.5];
        let ev = additive_evaluator(values.clone());
        let design = build_cs_design(6, 50, &ev, 11).unwrap();
        let c = (3.0f64 / 6.0).sqrt();
        for r in 0..50 {
            let row = design.row(r);
            assert!(row.iter().all(|&a| a == 0.0 || a == c || a == -c));
            let expected: f64 = row.iter().zip(&values).map(|(a, v)| a * v).sum();
            assert!((design.responses()[r] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn cs_zero_row_has_zero_response() {
        // with n = 1 a zero draw is likely within a few rows
        let ev = additive_evaluator(vec![3.0]);
        let design = build_cs_design(1, 40, &ev, 5).unwrap();
        let zero_rows: Vec<usize> = (0..40).filter(|&r| design.row(r)[0] == 0.0).collect();
        assert!(!zero_rows.is_empty());
        for r in zero_rows {
            assert_eq!(design.responses()[r], 0.0);
        }
    }

    #[test]
    fn datamodel_identity_design() {
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let y = vec![0.9, -0.3, 0.05];
        let design = DesignMatrix::new(3, rows, y.clone(), DesignKind::UniformBinary).unwrap();
        let alpha = 0.2;
        let r = fit_datamodel(&design, alpha, &SolveConfig::default()).unwrap();
        // separable: minimizing (w - y)^2 + alpha |w| shrinks by alpha / 2
        let expected = crate::solver::soft_threshold(&y, alpha / 2.0);
        for (a, b) in r.scores.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn datamodel_noiseless_recovery() {
        let w_true = vec![1.0, -0.5, 0.25, 2.0];
        let rows = vec![
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0, 1.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0, 1.0],
        ];
        let y = rows
            .iter()
            .map(|r| r.iter().zip(&w_true).map(|(a, w)| a * w).sum())
            .collect();
        let design = DesignMatrix::new(4, rows, y, DesignKind::UniformBinary).unwrap();
        let r = fit_datamodel(&design, 1e-8, &SolveConfig::default()).unwrap();
        for (a, b) in r.scores.iter().zip(&w_true) {
            assert!((a - b).abs() < 1e-4);
        }
        match &r.diagnostics {
            Diagnostics::Regression(fit) => assert_eq!(fit.rank, 4),
            other => panic!("unexpected diagnostics {other:?}"),
        }
    }

    #[test]
    fn random_scores_are_reproducible_permutation() {
        let names: Vec<String> = (0..7).map(|i| format!("d{i}")).collect();
        let a = score_random(names.clone(), 7).unwrap();
        let b = score_random(names, 7).unwrap();
        assert_eq!(a.scores, b.scores);
        let mut sorted = a.scores.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, (1..=7).map(|r| r as f64).collect::<Vec<_>>());
    }
}
