//! Synthetic worlds with exact quadratic utilities.
//!
//! A world is a set of ground-truth dataset gradients, a target gradient and
//! per-example stores drawn around them. The target loss is the isotropic
//! quadratic `L(theta) = -<g_tar, theta> + |theta|^2 / (2 lambda)`, so subset
//! utilities, surrogate agreement and preview stability can all be checked
//! against closed forms.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use itertools::Itertools;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::gram::{compute_gram, GramSystem};
use crate::seeds::derive_seed;
use crate::selection::{
    borda_aggregate, rank_order, run_fixed_compute_protocol, select_top_k_scores, BatchSource,
    BordaTable, ProtocolConfig, Trainer, Weighting,
};
use crate::solver::SolveConfig;
use crate::store::{
    dot, l2_norm, preview_subsample, GradientSet, PerExampleStore, RepresentationKind,
};
use crate::valuation::{solve_kmm, surrogate_subset_score, KmmMode, SubsetEvaluator};

const ENUMERATION_LIMIT: f64 = 1e6;

/// How dataset gradients relate to each other.
#[derive(Debug, Clone, PartialEq)]
pub enum Redundancy {
    /// Independent Gaussian rows with entries of variance `1/d`.
    Independent,
    /// Independent rows, then row `to` overwritten by row `from`.
    Duplicate { from: usize, to: usize },
    /// Rows are jittered copies of `clusters` Gaussian centres.
    Clustered { clusters: usize, jitter: f64 },
    /// The three-vector example: `g_tar = (1, 1)`, `g1 = g2 = (1, 0.1)`,
    /// `g3 = (0, 1)`. Ignores `n` and `d`.
    PaperExample,
    /// `g_i = sqrt(scale) e_i + shared e_n`, so that the Gram matrix is
    /// `scale I + shared^2 11'` with smallest eigenvalue `scale`. The target
    /// is a random direction of norm 0.9. Needs `d > n`.
    Orthogonal { scale: f64, shared: f64 },
}

impl fmt::Display for Redundancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Redundancy::Independent => write!(f, "independent"),
            Redundancy::Duplicate { from, to } => write!(f, "duplicate({from}->{to})"),
            Redundancy::Clustered { clusters, jitter } => {
                write!(f, "clustered({clusters},{jitter})")
            }
            Redundancy::PaperExample => write!(f, "paper-example"),
            Redundancy::Orthogonal { scale, shared } => write!(f, "orthogonal({scale},{shared})"),
        }
    }
}

impl FromStr for Redundancy {
    type Err = Error;

    /// Accepts `independent`, `paper-example`, `duplicate(a->b)` (or `a→b`),
    /// `clustered(c)` / `clustered(c,jitter)` and `orthogonal(scale,shared)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Validation(format!("unknown redundancy pattern `{s}`"));
        match s {
            "independent" => return Ok(Redundancy::Independent),
            "paper-example" => return Ok(Redundancy::PaperExample),
            _ => {}
        }
        let (head, args) = s.split_once('(').ok_or_else(bad)?;
        let args = args.strip_suffix(')').ok_or_else(bad)?;
        match head {
            "duplicate" => {
                let (a, b) = args
                    .split_once("->")
                    .or_else(|| args.split_once('→'))
                    .ok_or_else(bad)?;
                Ok(Redundancy::Duplicate {
                    from: a.trim().parse().map_err(|_| bad())?,
                    to: b.trim().parse().map_err(|_| bad())?,
                })
            }
            "clustered" => {
                let parts: Vec<&str> = args.split(',').map(str::trim).collect();
                let clusters = parts[0].parse().map_err(|_| bad())?;
                let jitter = match parts.get(1) {
                    Some(j) => j.parse().map_err(|_| bad())?,
                    None => 0.05,
                };
                Ok(Redundancy::Clustered { clusters, jitter })
            }
            "orthogonal" => {
                let (a, b) = args.split_once(',').ok_or_else(bad)?;
                Ok(Redundancy::Orthogonal {
                    scale: a.trim().parse().map_err(|_| bad())?,
                    shared: b.trim().parse().map_err(|_| bad())?,
                })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n: usize,
    pub d: usize,
    pub redundancy: Redundancy,
    pub eta: f64,
    pub lambda_curv: f64,
    /// Per-coordinate standard deviation of per-example noise.
    pub noise_sigma: f64,
    /// Per-example rows are clipped to this norm.
    pub grad_cap: f64,
    pub examples_per_dataset: usize,
    pub seed: u64,
}

impl WorldConfig {
    pub fn new(n: usize, d: usize, redundancy: Redundancy, seed: u64) -> Self {
        Self {
            n,
            d,
            redundancy,
            eta: 1.0,
            lambda_curv: 1.0,
            noise_sigma: 0.1,
            grad_cap: f64::INFINITY,
            examples_per_dataset: 64,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub set: GradientSet,
    pub eta: f64,
    pub lambda_curv: f64,
    pub noise_sigma: f64,
    pub grad_cap: f64,
    /// Noisy examples around each `g_i`.
    pub per_example: PerExampleStore,
    /// Noisy examples around `g_tar`, as a one-dataset store.
    pub target_examples: PerExampleStore,
    pub seed: u64,
}

/// Builds a world with unit step size and curvature, noise 0.1 and 64
/// examples per dataset.
pub fn generate_world(
    n: usize,
    d: usize,
    redundancy: Redundancy,
    seed: u64,
) -> Result<SyntheticWorld> {
    generate_world_with(&WorldConfig::new(n, d, redundancy, seed))
}

fn check_world_config(cfg: &WorldConfig) -> Result<()> {
    if !(cfg.eta > 0.0) || !(cfg.lambda_curv > 0.0) {
        return Err(Error::Validation("eta and lambda must be positive".into()));
    }
    if !(cfg.noise_sigma >= 0.0) || !(cfg.grad_cap > 0.0) {
        return Err(Error::Validation(
            "noise must be >= 0 and the gradient cap > 0".into(),
        ));
    }
    if cfg.examples_per_dataset == 0 {
        return Err(Error::Validation(
            "need at least one example per dataset".into(),
        ));
    }
    Ok(())
}

pub fn generate_world_with(cfg: &WorldConfig) -> Result<SyntheticWorld> {
    check_world_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "world/vectors"));
    let (rows, target) = match cfg.redundancy {
        Redundancy::PaperExample => (
            vec![vec![1.0, 0.1], vec![1.0, 0.1], vec![0.0, 1.0]],
            vec![1.0, 1.0],
        ),
        _ if cfg.n == 0 || cfg.d == 0 => {
            return Err(Error::Validation("n and d must be at least 1".into()));
        }
        Redundancy::Independent => independent(cfg.n, cfg.d, &mut rng),
        Redundancy::Duplicate { from, to } => {
            if from >= cfg.n || to >= cfg.n {
                return Err(Error::Validation(format!(
                    "duplicate({from}->{to}) out of range for n={}",
                    cfg.n
                )));
            }
            let (mut rows, target) = independent(cfg.n, cfg.d, &mut rng);
            rows[to] = rows[from].clone();
            (rows, target)
        }
        Redundancy::Clustered { clusters, jitter } => {
            if clusters == 0 || !(jitter >= 0.0) {
                return Err(Error::Validation(
                    "clustered needs >= 1 cluster and jitter >= 0".into(),
                ));
            }
            let (centres, target) = independent(clusters, cfg.d, &mut rng);
            let rows = (0..cfg.n)
                .map(|i| {
                    let noise = gaussian(cfg.d, jitter / (cfg.d as f64).sqrt(), &mut rng);
                    centres[i % clusters]
                        .iter()
                        .zip(noise)
                        .map(|(c, e)| c + e)
                        .collect()
                })
                .collect();
            (rows, target)
        }
        Redundancy::Orthogonal { scale, shared } => {
            if cfg.d <= cfg.n || !(scale > 0.0) {
                return Err(Error::Validation(
                    "orthogonal worlds need d > n and scale > 0".into(),
                ));
            }
            let a = scale.sqrt();
            let rows = (0..cfg.n)
                .map(|i| {
                    let mut g = vec![0.0; cfg.d];
                    g[i] = a;
                    g[cfg.n] = shared;
                    g
                })
                .collect();
            let mut target = gaussian(cfg.d, 1.0, &mut rng);
            let norm = l2_norm(&target);
            target.iter_mut().for_each(|t| *t *= 0.9 / norm);
            (rows, target)
        }
    };
    let names = (1..=rows.len()).map(|i| format!("g{i}")).collect();
    let set = GradientSet::new(names, rows, target, RepresentationKind::OneStepGradient)?;
    world_from_set(set, cfg)
}

/// Wraps existing gradients as a world: per-example stores are drawn around
/// the given rows and target. `n`, `d` and `redundancy` in `cfg` are ignored.
pub fn world_from_set(set: GradientSet, cfg: &WorldConfig) -> Result<SyntheticWorld> {
    check_world_config(cfg)?;
    let dim = set.dim();
    let per_dataset: Vec<Vec<f64>> = (0..set.n_datasets())
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, &format!("world/examples/{i}"));
            noisy_block(set.row(i), cfg, seed)
        })
        .collect();
    let per_example = PerExampleStore::new(dim, per_dataset)?;
    let target_block = noisy_block(
        set.target(),
        cfg,
        derive_seed(cfg.seed, "world/examples/target"),
    );
    let target_examples = PerExampleStore::new(dim, vec![target_block])?;
    Ok(SyntheticWorld {
        set,
        eta: cfg.eta,
        lambda_curv: cfg.lambda_curv,
        noise_sigma: cfg.noise_sigma,
        grad_cap: cfg.grad_cap,
        per_example,
        target_examples,
        seed: cfg.seed,
    })
}

fn gaussian(d: usize, sd: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..d)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn independent(n: usize, d: usize, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    let sd = 1.0 / (d as f64).sqrt();
    let target = gaussian(d, sd, rng);
    let rows = (0..n).map(|_| gaussian(d, sd, rng)).collect();
    (rows, target)
}

fn noisy_block(centre: &[f64], cfg: &WorldConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = Vec::with_capacity(cfg.examples_per_dataset * centre.len());
    for _ in 0..cfg.examples_per_dataset {
        let mut row: Vec<f64> = centre
            .iter()
            .map(|&c| c + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = l2_norm(&row);
        if norm > cfg.grad_cap {
            row.iter_mut().for_each(|x| *x *= cfg.grad_cap / norm);
        }
        block.extend(row);
    }
    block
}

fn check_subset(n: usize, subset: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in subset {
        if i >= n {
            return Err(Error::Validation(format!(
                "index {i} out of range for N={n}"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Validation(format!("index {i} repeated in subset")));
        }
    }
    Ok(())
}

/// `eta <g_tar, g(S)> - eta^2 |g(S)|^2 / (2 lambda)` with `g(S)` the sum of
/// the subset's gradients.
pub fn exact_utility(world: &SyntheticWorld, subset: &[usize]) -> Result<f64> {
    let set = &world.set;
    check_subset(set.n_datasets(), subset)?;
    let mut sum = vec![0.0; set.dim()];
    for &i in subset {
        sum.iter_mut().zip(set.row(i)).for_each(|(s, g)| *s += g);
    }
    let eta = world.eta;
    Ok(eta * dot(set.target(), &sum) - eta * eta * dot(&sum, &sum) / (2.0 * world.lambda_curv))
}

/// Exact quadratic utility of a gradient set as a subset evaluator, computed
/// from its Gram system: `eta sum beta_i - eta^2 / (2 lambda) sum K_ij`.
pub fn utility_evaluator(
    set: &GradientSet,
    eta: f64,
    lambda_curv: f64,
) -> SubsetEvaluator<'static> {
    let gram = compute_gram(set);
    SubsetEvaluator::new(move |subset: &[usize]| {
        let linear: f64 = subset.iter().map(|&i| gram.beta()[i]).sum();
        let quad: f64 = subset
            .iter()
            .flat_map(|&i| subset.iter().map(move |&j| (i, j)))
            .map(|(i, j)| gram.k(i, j))
            .sum();
        eta * linear - eta * eta * quad / (2.0 * lambda_curv)
    })
}

fn guard_enumeration(n: usize, k: usize) -> Result<()> {
    if k > n {
        return Err(Error::Validation(format!("subset size {k} exceeds N={n}")));
    }
    let count = binomial(n, k);
    if count > ENUMERATION_LIMIT {
        return Err(Error::Budget(format!(
            "C({n},{k}) = {count:.3e} subsets exceeds the 1e6 guard"
        )));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSubset {
    pub subset: Vec<usize>,
    pub utility: f64,
    pub evaluations: usize,
}

/// Exhaustive search over size-`k` subsets; ties keep the lexicographically
/// first subset.
pub fn brute_force_best_subset(world: &SyntheticWorld, k: usize) -> Result<BestSubset> {
    let n = world.set.n_datasets();
    guard_enumeration(n, k)?;
    let mut best = BestSubset {
        subset: Vec::new(),
        utility: f64::NEG_INFINITY,
        evaluations: 0,
    };
    for subset in (0..n).combinations(k) {
        let utility = exact_utility(world, &subset)?;
        best.evaluations += 1;
        if utility > best.utility {
            best.subset = subset;
            best.utility = utility;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Rank agreement

/// Ranks starting at 1, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let shared = (start + end) as f64 / 2.0 + 1.0;
        order[start..=end].iter().for_each(|&i| ranks[i] = shared);
        start = end + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// input is constant or shorter than two.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Two-sided p-value for a Spearman correlation. Uses the t approximation
/// from 20 observations up, exact enumeration of permutations up to 9, and
/// a seeded Monte Carlo permutation test in between.
pub fn spearman_p_value(a: &[f64], b: &[f64], seed: u64) -> Option<f64> {
    let rho = spearman(a, b)?;
    let n = a.len();
    if n >= 20 {
        if rho.abs() >= 1.0 {
            return Some(0.0);
        }
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).ok()?;
        return Some((2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let threshold = rho.abs() - 1e-12;
    let extreme = |perm: &[f64]| pearson(&ra, perm).is_some_and(|r| r.abs() >= threshold);
    if n <= 9 {
        let (mut hits, mut total) = (0usize, 0usize);
        for perm in rb.iter().copied().permutations(n) {
            total += 1;
            hits += extreme(&perm) as usize;
        }
        return Some(hits as f64 / total as f64);
    }
    const DRAWS: usize = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = rb.clone();
    let mut hits = 0;
    for _ in 0..DRAWS {
        perm.shuffle(&mut rng);
        hits += extreme(&perm) as usize;
    }
    Some((hits + 1) as f64 / (DRAWS + 1) as f64)
}

/// Size of the intersection of the top-`t` index sets of two score vectors.
pub fn top_overlap(a: &[f64], b: &[f64], t: usize) -> usize {
    let top_a: Vec<usize> = rank_order(a).into_iter().take(t).collect();
    rank_order(b)
        .into_iter()
        .take(t)
        .filter(|i| top_a.contains(i))
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateAgreement {
    pub surrogate: String,
    /// `None` when either ranking is constant.
    pub spearman_rho: Option<f64>,
    pub p_value: Option<f64>,
    pub top_overlap: usize,
    pub top_t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaithfulnessReport {
    pub k: usize,
    pub subsets: Vec<Vec<usize>>,
    pub utilities: Vec<f64>,
    /// Surrogate name to its value on every subset.
    pub surrogate_values: BTreeMap<String, Vec<f64>>,
    pub agreement: Vec<SurrogateAgreement>,
}

/// Compares exact utilities over every size-`k` subset with additive
/// (`sum beta_i`) and corrected (`sum beta_i - 1/2 sum K_ij`) surrogates
/// built from the world's one-step gradients and, when given, task vectors.
pub fn faithfulness_study(
    world: &SyntheticWorld,
    k: usize,
    task_vectors: Option<&GradientSet>,
) -> Result<FaithfulnessReport> {
    let n = world.set.n_datasets();
    guard_enumeration(n, k)?;
    let subsets: Vec<Vec<usize>> = (0..n).combinations(k).collect();
    let utilities = subsets
        .iter()
        .map(|s| exact_utility(world, s))
        .collect::<Result<Vec<_>>>()?;
    let mut grams = vec![("one_step", compute_gram(&world.set))];
    if let Some(tv) = task_vectors {
        if tv.n_datasets() != n {
            return Err(Error::Shape(format!(
                "{} task vectors for {n} datasets",
                tv.n_datasets()
            )));
        }
        grams.push(("task_vector", compute_gram(tv)));
    }
    let mut surrogate_values = BTreeMap::new();
    let mut agreement = Vec::new();
    let top_t = 10.min(subsets.len());
    for (label, gram) in &grams {
        for (suffix, corrected) in [("additive", false), ("corrected", true)] {
            let name = format!("{label}_{suffix}");
            let values = subsets
                .iter()
                .map(|s| surrogate_subset_score(gram, s, corrected))
                .collect::<Result<Vec<_>>>()?;
            agreement.push(SurrogateAgreement {
                surrogate: name.clone(),
                spearman_rho: spearman(&utilities, &values),
                p_value: spearman_p_value(&utilities, &values, derive_seed(world.seed, &name)),
                top_overlap: top_overlap(&utilities, &values, top_t),
                top_t,
            });
            surrogate_values.insert(name, values);
        }
    }
    Ok(FaithfulnessReport {
        k,
        subsets,
        utilities,
        surrogate_values,
        agreement,
    })
}

/// Writes `subset,utility,<surrogate>...` with subsets as `+`-joined names.
pub fn write_faithfulness_csv(
    report: &FaithfulnessReport,
    names: &[String],
    mut out: impl Write,
) -> Result<()> {
    let columns: Vec<&String> = report.surrogate_values.keys().collect();
    write!(out, "subset,utility")?;
    for c in &columns {
        write!(out, ",{c}")?;
    }
    writeln!(out)?;
    for (row, subset) in report.subsets.iter().enumerate() {
        let label = subset.iter().map(|&i| names[i].as_str()).join("+");
        write!(out, "{label},{}", report.utilities[row])?;
        for c in &columns {
            write!(out, ",{}", report.surrogate_values[*c][row])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Preview stability

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityConfig {
    pub n: usize,
    pub k_budget: f64,
    /// Lower bound on the smallest Gram eigenvalue.
    pub mu_floor: f64,
    /// Per-example gradient norm cap `C`.
    pub grad_bound: f64,
    pub m_grid: Vec<usize>,
    pub replicas: usize,
    pub delta: f64,
    pub noise_sigma: f64,
    /// Examples per dataset, shared by all previews.
    pub store_size: usize,
    pub bootstrap: usize,
    pub solve: SolveConfig,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            n: 10,
            k_budget: 3.0,
            mu_floor: 0.5,
            grad_bound: 1.0,
            m_grid: vec![16, 64, 256, 1024, 4096],
            replicas: 64,
            delta: 0.05,
            noise_sigma: 0.1,
            store_size: 32_768,
            bootstrap: 500,
            solve: SolveConfig::default(),
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.k_budget, self.mu_floor, self.grad_bound, self.delta];
        if self.n == 0 || self.replicas == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Validation(
                "stability parameters must be positive".into(),
            ));
        }
        if self.delta >= 1.0 || !(self.noise_sigma >= 0.0) {
            return Err(Error::Validation(
                "delta must lie in (0, 1) and noise must be >= 0".into(),
            ));
        }
        if self.m_grid.is_empty()
            || self.m_grid[0] == 0
            || self.m_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Validation(
                "m grid must be positive and strictly increasing".into(),
            ));
        }
        if *self.m_grid.last().unwrap() > self.store_size {
            return Err(Error::Validation(
                "largest preview exceeds the store size".into(),
            ));
        }
        self.solve.validate()
    }

    /// Dimension of the constructed world.
    pub fn dim(&self) -> usize {
        (self.n + 1).max(16)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub m_grid: Vec<usize>,
    /// `errors[m][replica]` is `|w_hat - w*|_2`.
    pub errors: Vec<Vec<f64>>,
    pub mean_error: Vec<f64>,
    pub std_error: Vec<f64>,
    pub theoretical_bounds: Vec<f64>,
    /// Least-squares slope of log mean error against log m; `None` when the
    /// fit is degenerate (some mean error is zero).
    pub slope: Option<f64>,
    /// 95% percentile bootstrap interval over replicas.
    pub slope_ci: Option<(f64, f64)>,
    pub degenerate: bool,
    /// Share of replicas at the largest m whose error is below the bound.
    pub frac_below_bound: f64,
    pub lambda_min: f64,
    pub dim: usize,
}

/// Builds the orthogonal world (`lambda_min(K) = 1.2 mu`), draws `replicas`
/// previews of every size in the grid, solves the constrained QP on the true
/// and preview Gram systems and records the weight error.
pub fn stability_experiment(cfg: &StabilityConfig, seed: u64) -> Result<StabilityReport> {
    cfg.validate()?;
    let d = cfg.dim();
    let world = generate_world_with(&WorldConfig {
        n: cfg.n,
        d,
        redundancy: Redundancy::Orthogonal {
            scale: 1.2 * cfg.mu_floor,
            shared: 0.2,
        },
        eta: 1.0,
        lambda_curv: 1.0,
        noise_sigma: cfg.noise_sigma,
        grad_cap: cfg.grad_bound,
        examples_per_dataset: cfg.store_size,
        seed,
    })?;
    // the population is the store itself: its full means are the true gradients
    let truth_rows = (0..cfg.n).map(|i| world.per_example.full_mean(i)).collect();
    let truth = GradientSet::new(
        world.set.names().to_vec(),
        truth_rows,
        world.set.target().to_vec(),
        RepresentationKind::OneStepGradient,
    )?;
    let true_gram = compute_gram(&truth);
    let lambda_min = smallest_eigenvalue(&true_gram);
    if lambda_min < cfg.mu_floor {
        return Err(Error::Validation(format!(
            "constructed Gram has lambda_min {lambda_min:.4} below mu = {}",
            cfg.mu_floor
        )));
    }
    let mode = KmmMode::Constrained(cfg.k_budget);
    let w_star = solve_kmm(&true_gram, mode, &cfg.solve)?.weights;

    let cells: Vec<(usize, usize)> = (0..cfg.m_grid.len())
        .flat_map(|mi| (0..cfg.replicas).map(move |r| (mi, r)))
        .collect();
    let flat = cells
        .par_iter()
        .map(|&(mi, r)| {
            let m = cfg.m_grid[mi];
            let preview_seed = derive_seed(seed, &format!("stability/m={m}/r={r}"));
            let preview = preview_subsample(&truth, &world.per_example, m, preview_seed)?;
            let w_hat = solve_kmm(&compute_gram(&preview), mode, &cfg.solve)?.weights;
            Ok(w_hat
                .iter()
                .zip(&w_star)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let errors: Vec<Vec<f64>> = flat.chunks(cfg.replicas).map(<[f64]>::to_vec).collect();

    let mean_error: Vec<f64> = errors.iter().map(|e| mean(e)).collect();
    let std_error = errors
        .iter()
        .zip(&mean_error)
        .map(|(e, &mu)| (e.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / e.len() as f64).sqrt())
        .collect();
    let theoretical_bounds: Vec<f64> = cfg
        .m_grid
        .iter()
        .map(|&m| theoretical_bound(cfg, d, m))
        .collect();
    let last = errors.len() - 1;
    let frac_below_bound = errors[last]
        .iter()
        .filter(|&&e| e < theoretical_bounds[last])
        .count() as f64
        / cfg.replicas as f64;

    let degenerate = mean_error.iter().any(|&e| !(e > 0.0));
    let (slope, slope_ci) = if degenerate {
        (None, None)
    } else {
        let slope = log_log_slope(&cfg.m_grid, &mean_error);
        (slope, bootstrap_slope(cfg, &errors, seed))
    };
    Ok(StabilityReport {
        m_grid: cfg.m_grid.clone(),
        errors,
        mean_error,
        std_error,
        theoretical_bounds,
        slope,
        slope_ci,
        degenerate,
        frac_below_bound,
        lambda_min,
        dim: d,
    })
}

fn smallest_eigenvalue(gram: &GramSystem) -> f64 {
    let n = gram.n();
    let k = DMatrix::from_row_slice(n, n, gram.k_matrix());
    SymmetricEigen::new(k)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn log_log_slope(m_grid: &[usize], means: &[f64]) -> Option<f64> {
    if m_grid.len() < 2 || means.iter().any(|&e| !(e > 0.0)) {
        return None;
    }
    let x: Vec<f64> = m_grid.iter().map(|&m| (m as f64).ln()).collect();
    let y: Vec<f64> = means.iter().map(|e| e.ln()).collect();
    let (mx, my) = (mean(&x), mean(&y));
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn bootstrap_slope(cfg: &StabilityConfig, errors: &[Vec<f64>], seed: u64) -> Option<(f64, f64)> {
    if cfg.bootstrap == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stability/bootstrap"));
    let r = cfg.replicas;
    let mut slopes: Vec<f64> = (0..cfg.bootstrap)
        .filter_map(|_| {
            let means: Vec<f64> = errors
                .iter()
                .map(|e| (0..r).map(|_| e[rng.random_range(0..r)]).sum::<f64>() / r as f64)
                .collect();
            log_log_slope(&cfg.m_grid, &means)
        })
        .collect();
    if slopes.is_empty() {
        return None;
    }
    slopes.sort_by(f64::total_cmp);
    let at = |q: f64| slopes[((slopes.len() - 1) as f64 * q).round() as usize];
    Some((at(0.025), at(0.975)))
}

/// The plug-in bound `(eps/mu) (2 k sqrt(N) C + k eps + C)` with
/// `eps = sqrt(2 v L) + 4 C L / (3 m)`, `v = 4 N C^2 / m` and
/// `L = ln((N + d) / delta)`.
pub fn theoretical_bound(cfg: &StabilityConfig, d: usize, m: usize) -> f64 {
    let n = cfg.n as f64;
    let m = m as f64;
    let c = cfg.grad_bound;
    let k = cfg.k_budget;
    let log_term = ((n + d as f64) / cfg.delta).ln();
    let v = 4.0 * n * c * c / m;
    let eps = (2.0 * v * log_term).sqrt() + 4.0 * c * log_term / (3.0 * m);
    eps / cfg.mu_floor * (2.0 * k * n.sqrt() * c + k * eps + c)
}

/// Writes `m,replica,error`.
pub fn write_stability_csv(report: &StabilityReport, mut out: impl Write) -> Result<()> {
    writeln!(out, "m,replica,error")?;
    for (m, errs) in report.m_grid.iter().zip(&report.errors) {
        for (r, e) in errs.iter().enumerate() {
            writeln!(out, "{m},{r},{e}")?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Quadratic trainer

/// Parameter vector trained by plain gradient steps on sampled examples and
/// scored by the negated isotropic quadratic target loss.
#[derive(Debug, Clone)]
pub struct QuadraticTrainer {
    theta: Vec<f64>,
    target: Vec<f64>,
    eta: f64,
    lambda_curv: f64,
    updates: usize,
}

impl QuadraticTrainer {
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Updates since the last reset.
    pub fn update_count(&self) -> usize {
        self.updates
    }

    /// `<g_tar, theta> - |theta|^2 / (2 lambda)`.
    pub fn metric(&self) -> f64 {
        dot(&self.target, &self.theta) - dot(&self.theta, &self.theta) / (2.0 * self.lambda_curv)
    }
}

impl Trainer for QuadraticTrainer {
    type Batch = Vec<f64>;

    fn reset(&mut self) {
        self.theta.iter_mut().for_each(|t| *t = 0.0);
        self.updates = 0;
    }

    fn update(&mut self, batch: &Vec<f64>) {
        for (t, g) in self.theta.iter_mut().zip(batch) {
            *t += self.eta * g;
        }
        self.updates += 1;
    }
}

pub fn quadratic_trainer(world: &SyntheticWorld) -> QuadraticTrainer {
    QuadraticTrainer {
        theta: vec![0.0; world.set.dim()],
        target: world.set.target().to_vec(),
        eta: world.eta,
        lambda_curv: world.lambda_curv,
        updates: 0,
    }
}

/// Draws one uniformly random example of a dataset per batch.
pub struct ExampleSource<'a> {
    store: &'a PerExampleStore,
    dataset: usize,
}

impl<'a> ExampleSource<'a> {
    pub fn new(store: &'a PerExampleStore, dataset: usize) -> Self {
        Self { store, dataset }
    }
}

impl BatchSource<Vec<f64>> for ExampleSource<'_> {
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let j = rng.random_range(0..self.store.count(self.dataset));
        self.store.example(self.dataset, j).to_vec()
    }
}

impl SyntheticWorld {
    pub fn target_source(&self) -> ExampleSource<'_> {
        ExampleSource::new(&self.target_examples, 0)
    }

    pub fn aux_sources(&self) -> Vec<ExampleSource<'_>> {
        (0..self.set.n_datasets())
            .map(|i| ExampleSource::new(&self.per_example, i))
            .collect()
    }
}

/// Selects top-k under each labelled score vector, trains the quadratic trainer
/// under the fixed-compute protocol and Borda-aggregates final metrics.
pub fn compare_methods(
    world: &SyntheticWorld,
    methods: &[(String, Vec<f64>)],
    k_grid: &[usize],
    protocol: &ProtocolConfig,
    weighting: Weighting,
) -> Result<BordaTable> {
    let target = world.target_source();
    let aux = world.aux_sources();
    let aux_refs: Vec<&dyn BatchSource<Vec<f64>>> = aux
        .iter()
        .map(|a| a as &dyn BatchSource<Vec<f64>>)
        .collect();
    let mut names = Vec::with_capacity(methods.len());
    let mut metrics = Vec::with_capacity(methods.len());
    for (label, scores) in methods {
        if scores.len() != world.set.n_datasets() {
            return Err(Error::Shape(format!(
                "method `{label}` has {} scores for {} datasets",
                scores.len(),
                world.set.n_datasets()
            )));
        }
        let plan = select_top_k_scores(scores, k_grid, weighting)?;
        let mut trainer = quadratic_trainer(world);
        let outcomes = run_fixed_compute_protocol(
            &plan,
            protocol,
            &mut trainer,
            QuadraticTrainer::metric,
            &target,
            &aux_refs,
        )?;
        names.push(label.clone());
        metrics.push(outcomes.iter().map(|o| o.metric).collect());
    }
    borda_aggregate(&names, k_grid, &metrics, true)
}
