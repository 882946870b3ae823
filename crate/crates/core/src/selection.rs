//! Budgeted selection and method comparison.
//!
//! Scores become nested top-k selections over positive-score datasets. A
//! fixed-compute protocol trains once per budget with the same number of
//! updates, mixing target and auxiliary batches, and Borda counts aggregate
//! the per-budget rankings of several methods.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::valuation::ValuationResult;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    Uniform,
    Softmax { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPlan {
    pub n: usize,
    pub k_grid: Vec<usize>,
    /// Selected dataset indices per budget, best first.
    pub per_k: BTreeMap<usize, Vec<usize>>,
    pub weighting: Weighting,
    /// Per-budget sampling weights over all N datasets; zero off the
    /// selection, summing to one when the selection is non-empty.
    pub mixing_weights: BTreeMap<usize, Vec<f64>>,
}

impl SelectionPlan {
    pub fn selected(&self, k: usize) -> &[usize] {
        self.per_k.get(&k).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn weights(&self, k: usize) -> Option<&[f64]> {
        self.mixing_weights.get(&k).map(Vec::as_slice)
    }
}

/// Indices sorted by score, highest first; equal scores keep index order.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn select_top_k(scores: &ValuationResult, k_grid: &[usize]) -> Result<SelectionPlan> {
    select_top_k_scores(&scores.scores, k_grid, Weighting::Uniform)
}

pub fn select_top_k_weighted(
    scores: &ValuationResult,
    k_grid: &[usize],
    weighting: Weighting,
) -> Result<SelectionPlan> {
    select_top_k_scores(&scores.scores, k_grid, weighting)
}

/// For each budget `k`, takes positive-score datasets in rank order until `k`
/// are chosen or the positives run out.
pub fn select_top_k_scores(
    scores: &[f64],
    k_grid: &[usize],
    weighting: Weighting,
) -> Result<SelectionPlan> {
    if k_grid.is_empty() {
        return Err(Error::Validation("k grid is empty".into()));
    }
    if let Weighting::Softmax { temperature } = weighting {
        if !(temperature > 0.0) {
            return Err(Error::Validation("softmax temperature must be > 0".into()));
        }
    }
    let positives: Vec<usize> = rank_order(scores)
        .into_iter()
        .filter(|&i| scores[i] > 0.0)
        .collect();
    let mut per_k = BTreeMap::new();
    let mut mixing_weights = BTreeMap::new();
    for &k in k_grid {
        let chosen: Vec<usize> = positives.iter().copied().take(k).collect();
        let weights = match (weighting, chosen.is_empty()) {
            (_, true) => vec![0.0; scores.len()],
            (Weighting::Uniform, false) => {
                let mut w = vec![0.0; scores.len()];
                let share = 1.0 / chosen.len() as f64;
                chosen.iter().for_each(|&i| w[i] = share);
                w
            }
            (Weighting::Softmax { temperature }, false) => {
                softmax_weights(scores, &chosen, temperature)?
            }
        };
        per_k.insert(k, chosen);
        mixing_weights.insert(k, weights);
    }
    Ok(SelectionPlan {
        n: scores.len(),
        k_grid: k_grid.to_vec(),
        per_k,
        weighting,
        mixing_weights,
    })
}

/// Weights proportional to `exp(score / temperature)` over `selected`, zero
/// elsewhere.
pub fn softmax_weights(scores: &[f64], selected: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Validation(
            "softmax needs a non-empty selection".into(),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::Validation("softmax temperature must be > 0".into()));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= scores.len()) {
        return Err(Error::Validation(format!("index {bad} out of range")));
    }
    let peak = selected
        .iter()
        .map(|&i| scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights = vec![0.0; scores.len()];
    for &i in selected {
        weights[i] = ((scores[i] - peak) / temperature).exp();
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(weights)
}

// ---------------------------------------------------------------------------
// Fixed-compute protocol

/// Something a trainer can draw batches from.
pub trait BatchSource<B> {
    fn sample(&self, rng: &mut dyn RngCore) -> B;
}

/// Stateful learner driven by the protocol.
pub trait Trainer {
    type Batch;
    /// Returns to the initial state.
    fn reset(&mut self);
    fn update(&mut self, batch: &Self::Batch);
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetMix {
    /// One probability for every budget.
    Constant(f64),
    PerK(BTreeMap<usize, f64>),
}

impl TargetMix {
    fn for_k(&self, k: usize) -> Result<f64> {
        let rho = match self {
            TargetMix::Constant(r) => *r,
            TargetMix::PerK(map) => *map
                .get(&k)
                .ok_or_else(|| Error::Validation(format!("no target-mix probability for k={k}")))?,
        };
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Validation(format!(
                "target-mix probability {rho} outside (0, 1]"
            )));
        }
        Ok(rho)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    /// Optimizer updates per budget.
    pub step_budget: usize,
    pub rho: TargetMix,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetOutcome {
    pub k: usize,
    pub metric: f64,
    pub updates: usize,
    pub target_updates: usize,
    pub aux_updates: usize,
    /// Auxiliary draws were requested but the selection was empty, so target
    /// batches were used instead.
    pub fallback_to_target: bool,
}

/// Trains from scratch once per budget in `plan.k_grid`, each run taking
/// exactly `cfg.step_budget` updates. At every update a Bernoulli(rho_k) draw
/// picks a target batch; otherwise an auxiliary dataset is drawn from the
/// plan's mixing weights and a batch taken from it. Every budget replays the
/// same random stream (seeded by `cfg.seed`).
pub fn run_fixed_compute_protocol<T, B>(
    plan: &SelectionPlan,
    cfg: &ProtocolConfig,
    trainer: &mut T,
    eval: impl Fn(&T) -> f64,
    target_store: &dyn BatchSource<B>,
    aux_stores: &[&dyn BatchSource<B>],
) -> Result<Vec<BudgetOutcome>>
where
    T: Trainer<Batch = B>,
{
    if cfg.step_budget == 0 {
        return Err(Error::Validation("step budget must be >= 1".into()));
    }
    if aux_stores.len() != plan.n {
        return Err(Error::Shape(format!(
            "{} auxiliary stores for a plan over {} datasets",
            aux_stores.len(),
            plan.n
        )));
    }
    let mut outcomes = Vec::with_capacity(plan.k_grid.len());
    for &k in &plan.k_grid {
        let rho = cfg.rho.for_k(k)?;
        let selected = plan.selected(k);
        let weights = plan.weights(k).unwrap_or(&[]);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        trainer.reset();
        let mut outcome = BudgetOutcome {
            k,
            metric: 0.0,
            updates: 0,
            target_updates: 0,
            aux_updates: 0,
            fallback_to_target: false,
        };
        for _ in 0..cfg.step_budget {
            let use_target = rng.random_bool(rho);
            let batch = if use_target || selected.is_empty() {
                if !use_target {
                    outcome.fallback_to_target = true;
                }
                outcome.target_updates += 1;
                target_store.sample(&mut rng)
            } else {
                let dataset = draw_weighted(selected, weights, &mut rng);
                outcome.aux_updates += 1;
                aux_stores[dataset].sample(&mut rng)
            };
            trainer.update(&batch);
            outcome.updates += 1;
        }
        outcome.metric = eval(trainer);
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

fn draw_weighted(selected: &[usize], weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = selected
        .iter()
        .map(|&i| weights.get(i).copied().unwrap_or(0.0))
        .sum();
    if !(total > 0.0) {
        return selected[rng.random_range(0..selected.len())];
    }
    let mut u = rng.random::<f64>() * total;
    for &i in selected {
        u -= weights[i];
        if u < 0.0 {
            return i;
        }
    }
    *selected.last().expect("selection is non-empty")
}

// ---------------------------------------------------------------------------
// Borda aggregation

#[derive(Debug, Clone, PartialEq)]
pub struct BordaTable {
    pub methods: Vec<String>,
    pub k_grid: Vec<usize>,
    /// methods x budgets metric matrix.
    pub per_k_scores: Vec<Vec<f64>>,
    /// Points per method and budget.
    pub points: Vec<Vec<f64>>,
    pub borda: Vec<f64>,
    /// Best `(k, metric)` per method.
    pub best_k: Vec<(usize, f64)>,
}

/// At every budget the worst method earns 0 points, the next 1, and so on;
/// tied methods share the mean of the points their positions span.
pub fn borda_aggregate(
    methods: &[String],
    k_grid: &[usize],
    per_k_scores: &[Vec<f64>],
    higher_is_better: bool,
) -> Result<BordaTable> {
    let m = methods.len();
    if m == 0 || k_grid.is_empty() {
        return Err(Error::Validation(
            "Borda table needs methods and budgets".into(),
        ));
    }
    if per_k_scores.len() != m || per_k_scores.iter().any(|r| r.len() != k_grid.len()) {
        return Err(Error::Shape(
            "score matrix must be methods x budgets".into(),
        ));
    }
    if per_k_scores.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::Validation("metric matrix contains NaN".into()));
    }
    let goodness = |v: f64| if higher_is_better { v } else { -v };
    let mut points = vec![vec![0.0; k_grid.len()]; m];
    for col in 0..k_grid.len() {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            goodness(per_k_scores[a][col]).total_cmp(&goodness(per_k_scores[b][col]))
        });
        let mut start = 0;
        while start < m {
            let value = per_k_scores[order[start]][col];
            let mut end = start;
            while end + 1 < m && per_k_scores[order[end + 1]][col] == value {
                end += 1;
            }
            let shared = (start + end) as f64 / 2.0;
            for &method in &order[start..=end] {
                points[method][col] = shared;
            }
            start = end + 1;
        }
    }
    let borda = points.iter().map(|row| row.iter().sum()).collect();
    let best_k = per_k_scores
        .iter()
        .map(|row| {
            let mut best = 0;
            for col in 1..row.len() {
                if goodness(row[col]) > goodness(row[best]) {
                    best = col;
                }
            }
            (k_grid[best], row[best])
        })
        .collect();
    Ok(BordaTable {
        methods: methods.to_vec(),
        k_grid: k_grid.to_vec(),
        per_k_scores: per_k_scores.to_vec(),
        points,
        borda,
        best_k,
    })
}

/// Writes `method,k,metric,borda,best_k`, one row per method and budget.
pub fn write_results_csv(table: &BordaTable, mut out: impl Write) -> Result<()> {
    writeln!(out, "method,k,metric,borda,best_k")?;
    for (m, method) in table.methods.iter().enumerate() {
        for (col, k) in table.k_grid.iter().enumerate() {
            writeln!(
                out,
                "{method},{k},{},{},{}",
                table.per_k_scores[m][col], table.borda[m], table.best_k[m].0
            )?;
        }
    }
    Ok(())
}
