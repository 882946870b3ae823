//! First-order solvers for `min 1/2 w'Qw - c'w` over an l1 ball, or with an
//! l1 penalty, in Gram space (`Q` explicit) and in gradient space (`Q = G'G`
//! applied through matrix-vector products only).
//!
//! Both forms run accelerated proximal gradient with a monotone restart: when
//! the extrapolated step would raise the objective, the iteration falls back
//! to a plain step from the last accepted point and momentum is reset. Step
//! sizes start from a power-method estimate of the Lipschitz constant and are
//! doubled whenever the quadratic upper bound fails.
//!
//! Gram-space solves finish with an active-set polish: the support and signs
//! found by the first-order method define a small KKT system whose
//! least-squares solution replaces the iterate when it certifies at least as
//! well and does not raise the objective.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::store::{dot, GradientSet};

const POWER_ITERATIONS: usize = 30;
const LIPSCHITZ_SAFETY: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub max_iterations: usize,
    pub tol_rel_objective: f64,
    /// Added to the diagonal of `Q` (or `G'G`).
    pub ridge: f64,
    /// Scale on the linear term; only read where the solver builds that term
    /// itself (gradient space, and the valuation layer).
    pub lambda: f64,
    pub seed: u64,
    /// Keep the objective value of every accepted iterate.
    pub record_trace: bool,
    /// Run the active-set polish after Gram-space solves.
    pub polish: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            tol_rel_objective: 1e-10,
            ridge: 0.0,
            lambda: 1.0,
            seed: 0,
            record_trace: false,
            polish: true,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Validation("max_iterations must be >= 1".into()));
        }
        if !(self.tol_rel_objective > 0.0) {
            return Err(Error::Validation("tol_rel_objective must be > 0".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Validation("ridge must be finite and >= 0".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Validation("lambda must be finite and > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `||Gw - lambda g_tar||_2`, when the gradient vectors were available.
    pub residual_norm: Option<f64>,
    /// Largest violation of the first-order optimality conditions at `weights`.
    pub kkt_violation: f64,
    pub polished: bool,
    pub objective_trace: Vec<f64>,
}

/// Euclidean projection onto `{w : ||w||_1 <= radius}` (sort-based).
pub fn project_l1_ball(v: &[f64], radius: f64) -> Vec<f64> {
    debug_assert!(radius > 0.0);
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return v.to_vec();
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - radius) / (j + 1) as f64;
        if u > candidate {
            theta = candidate;
        } else {
            break;
        }
    }
    v.iter()
        .map(|x| x.signum() * (x.abs() - theta).max(0.0))
        .collect()
}

pub fn soft_threshold(v: &[f64], gamma: f64) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let shrunk = x.abs() - gamma;
            if shrunk > 0.0 {
                x.signum() * shrunk
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Regularizer {
    Ball(f64),
    L1(f64),
}

impl Regularizer {
    fn prox(&self, v: &[f64], step: f64) -> Vec<f64> {
        match *self {
            Regularizer::Ball(radius) => project_l1_ball(v, radius),
            Regularizer::L1(gamma) => soft_threshold(v, gamma * step),
        }
    }

    fn value(&self, w: &[f64]) -> f64 {
        match *self {
            Regularizer::Ball(_) => 0.0,
            Regularizer::L1(gamma) => gamma * w.iter().map(|x| x.abs()).sum::<f64>(),
        }
    }
}

trait Smooth {
    fn n(&self) -> usize;
    fn value(&self, w: &[f64]) -> f64;
    fn gradient(&self, w: &[f64]) -> Vec<f64>;
    /// Curvature operator `v -> Hv` used for the Lipschitz estimate.
    fn hessian_apply(&self, v: &[f64]) -> Vec<f64>;
}

struct GramObjective<'a> {
    q: &'a [f64],
    c: &'a [f64],
    ridge: f64,
}

impl GramObjective<'_> {
    fn qw(&self, w: &[f64]) -> Vec<f64> {
        let n = self.c.len();
        (0..n)
            .map(|i| dot(&self.q[i * n..(i + 1) * n], w) + self.ridge * w[i])
            .collect()
    }
}

impl Smooth for GramObjective<'_> {
    fn n(&self) -> usize {
        self.c.len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        0.5 * dot(w, &self.qw(w)) - dot(self.c, w)
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = self.qw(w);
        g.iter_mut().zip(self.c).for_each(|(g, c)| *g -= c);
        g
    }

    fn hessian_apply(&self, v: &[f64]) -> Vec<f64> {
        self.qw(v)
    }
}

/// `1/2 ||Gw - scaled_target||^2 + ridge/2 ||w||^2` with `G` the N rows of a
/// gradient set; never forms `G'G`.
struct LeastSquaresObjective<'a> {
    set: &'a GradientSet,
    scaled_target: Vec<f64>,
    ridge: f64,
}

impl LeastSquaresObjective<'_> {
    fn combine(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.set.dim()];
        for (wi, row) in w.iter().zip(self.set.rows()) {
            if *wi != 0.0 {
                out.iter_mut().zip(row).for_each(|(o, g)| *o += wi * g);
            }
        }
        out
    }

    fn residual(&self, w: &[f64]) -> Vec<f64> {
        let mut r = self.combine(w);
        r.iter_mut()
            .zip(&self.scaled_target)
            .for_each(|(r, t)| *r -= t);
        r
    }
}

impl Smooth for LeastSquaresObjective<'_> {
    fn n(&self) -> usize {
        self.set.n_datasets()
    }

    fn value(&self, w: &[f64]) -> f64 {
        let r = self.residual(w);
        0.5 * dot(&r, &r) + 0.5 * self.ridge * dot(w, w)
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let r = self.residual(w);
        self.set
            .rows()
            .zip(w)
            .map(|(g, wi)| dot(g, &r) + self.ridge * wi)
            .collect()
    }

    fn hessian_apply(&self, v: &[f64]) -> Vec<f64> {
        let gv = self.combine(v);
        self.set
            .rows()
            .zip(v)
            .map(|(g, vi)| dot(g, &gv) + self.ridge * vi)
            .collect()
    }
}

fn estimate_lipschitz(f: &impl Smooth) -> f64 {
    let n = f.n();
    // fixed, non-symmetric start so the estimate is deterministic
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_75).fract())
        .collect();
    let mut norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let hv = f.hessian_apply(&v);
        norm = dot(&hv, &hv).sqrt();
        if norm == 0.0 {
            break;
        }
        estimate = norm;
        v = hv.into_iter().map(|x| x / norm).collect();
    }
    estimate
}

struct Iterated {
    weights: Vec<f64>,
    objective: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn check_finite(w: &[f64], what: &str) -> Result<()> {
    if w.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite iterate in {what}")))
    }
}

/// One proximal-gradient step from `y`, doubling `lip` until the quadratic
/// upper bound holds.
fn prox_step(f: &impl Smooth, reg: Regularizer, y: &[f64], lip: &mut f64) -> Result<Vec<f64>> {
    let fy = f.value(y);
    let grad = f.gradient(y);
    check_finite(&grad, "gradient")?;
    for _ in 0..64 {
        let step = 1.0 / *lip;
        let trial: Vec<f64> = y.iter().zip(&grad).map(|(y, g)| y - step * g).collect();
        let z = reg.prox(&trial, step);
        let diff: Vec<f64> = z.iter().zip(y).map(|(z, y)| z - y).collect();
        let bound = fy + dot(&grad, &diff) + 0.5 * *lip * dot(&diff, &diff);
        if f.value(&z) <= bound + 1e-14 * (1.0 + fy.abs()) {
            return Ok(z);
        }
        *lip *= 2.0;
    }
    Err(Error::Numeric("step size search did not terminate".into()))
}

fn accelerated(f: &impl Smooth, reg: Regularizer, cfg: &SolveConfig) -> Result<Iterated> {
    let n = f.n();
    let estimate = estimate_lipschitz(f);
    let mut lip = if estimate > 0.0 {
        estimate / LIPSCHITZ_SAFETY
    } else {
        1.0
    };
    let objective = |w: &[f64]| f.value(w) + reg.value(w);

    let mut x = vec![0.0; n];
    let mut fx = objective(&x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut trace = Vec::new();
    if cfg.record_trace {
        trace.push(fx);
    }
    let mut calm = 0;
    let mut iterations = 0;
    let mut converged = false;
    // absolute floor for the relative test, from the objective scale at w = 0
    let g0 = f.gradient(&x);
    let floor = 1e-6 * fx.abs().max(0.5 * dot(&g0, &g0) / lip);

    for it in 1..=cfg.max_iterations {
        iterations = it;
        let z = prox_step(f, reg, &y, &mut lip)?;
        check_finite(&z, "iterate")?;
        let fz = objective(&z);
        let (next, f_next, restarted) = if fz <= fx {
            (z, fz, false)
        } else {
            let z = prox_step(f, reg, &x, &mut lip)?;
            let fz = objective(&z);
            if fz <= fx {
                (z, fz, true)
            } else {
                (x.clone(), fx, true)
            }
        };
        if !f_next.is_finite() {
            return Err(Error::Numeric("objective became non-finite".into()));
        }
        if restarted {
            t = 1.0;
            y = next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let momentum = (t - 1.0) / t_next;
            y = next
                .iter()
                .zip(&x)
                .map(|(a, b)| a + momentum * (a - b))
                .collect();
            t = t_next;
        }
        let change = (fx - f_next).abs();
        let reference = fx.abs().max(floor);
        x = next;
        fx = f_next;
        if cfg.record_trace {
            trace.push(fx);
        }
        if change <= cfg.tol_rel_objective * reference {
            calm += 1;
            if calm >= 2 {
                converged = true;
                break;
            }
        } else {
            calm = 0;
        }
    }
    Ok(Iterated {
        weights: x,
        objective: fx,
        iterations,
        converged,
        trace,
    })
}

fn validate_gram(q: &[f64], c: &[f64]) -> Result<usize> {
    let n = c.len();
    if n == 0 {
        return Err(Error::Validation("empty problem".into()));
    }
    if q.len() != n * n {
        return Err(Error::Shape(format!(
            "Q has {} entries, expected {n}x{n}",
            q.len()
        )));
    }
    if q.iter().chain(c).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in Q or c".into()));
    }
    let scale = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (q[i * n + j] - q[j * n + i]).abs() > 1e-9 * scale {
                return Err(Error::Validation(format!(
                    "Q is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(n)
}

fn gradient_of(q: &[f64], c: &[f64], ridge: f64, w: &[f64]) -> Vec<f64> {
    GramObjective { q, c, ridge }.gradient(w)
}

/// Optimality gap of `w` for `min 1/2 w'(Q + ridge I)w - c'w + gamma ||w||_1`.
pub fn penalized_kkt_violation(q: &[f64], c: &[f64], ridge: f64, gamma: f64, w: &[f64]) -> f64 {
    let g = gradient_of(q, c, ridge, w);
    g.iter()
        .zip(w)
        .map(|(g, w)| {
            if *w == 0.0 {
                (g.abs() - gamma).max(0.0)
            } else {
                (g + gamma * w.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Optimality gap of `w` for `min 1/2 w'(Q + ridge I)w - c'w` over
/// `||w||_1 <= k`, using the multiplier that best fits the support.
pub fn constrained_kkt_violation(q: &[f64], c: &[f64], ridge: f64, k: f64, w: &[f64]) -> f64 {
    ball_kkt(&gradient_of(q, c, ridge, w), w, k)
}

fn ball_kkt(g: &[f64], w: &[f64], k: f64) -> f64 {
    let l1: f64 = w.iter().map(|x| x.abs()).sum();
    let infeasible = (l1 - k).max(0.0);
    let on_boundary = k.is_finite() && l1 >= k * (1.0 - 1e-9);
    let support: Vec<usize> = (0..w.len()).filter(|&i| w[i] != 0.0).collect();
    let nu = if on_boundary && !support.is_empty() {
        let mean =
            support.iter().map(|&i| -g[i] * w[i].signum()).sum::<f64>() / support.len() as f64;
        mean.max(0.0)
    } else {
        0.0
    };
    (0..w.len())
        .map(|i| {
            if w[i] != 0.0 {
                (g[i] + nu * w[i].signum()).abs()
            } else {
                (g[i].abs() - nu).max(0.0)
            }
        })
        .fold(infeasible, f64::max)
}

/// Least-squares solve that rejects inconsistent singular systems.
fn lstsq(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let scale = a.amax().max(b.amax()).max(1.0);
    let svd = a.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let x = svd.solve(&b, eps).ok()?;
    let resid = (&a * &x - &b).amax();
    if resid <= 1e-9 * scale * (1.0 + x.amax()) && x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

fn signs_of(w: &[f64]) -> Vec<(usize, f64)> {
    (0..w.len())
        .filter(|&i| w[i] != 0.0)
        .map(|i| (i, w[i].signum()))
        .collect()
}

fn polish_penalized(
    q: &[f64],
    c: &[f64],
    ridge: f64,
    gamma: f64,
    start: &[f64],
) -> Option<Vec<f64>> {
    let n = c.len();
    let mut active = signs_of(start);
    for _ in 0..(2 * n + 2) {
        let s = active.len();
        let mut w = vec![0.0; n];
        if s > 0 {
            let a = DMatrix::from_fn(s, s, |r, col| {
                let (i, j) = (active[r].0, active[col].0);
                q[i * n + j] + if i == j { ridge } else { 0.0 }
            });
            let b = DVector::from_fn(s, |r, _| c[active[r].0] - gamma * active[r].1);
            let x = lstsq(a, b)?;
            let flipped: Vec<usize> = (0..s).filter(|&r| x[r] * active[r].1 <= 0.0).collect();
            if !flipped.is_empty() {
                let drop: Vec<usize> = flipped.iter().map(|&r| active[r].0).collect();
                active.retain(|(i, _)| !drop.contains(i));
                continue;
            }
            for (r, &(i, _)) in active.iter().enumerate() {
                w[i] = x[r];
            }
        }
        let g = gradient_of(q, c, ridge, &w);
        let tol = 1e-12 * (1.0 + gamma);
        let worst = (0..n)
            .filter(|&i| w[i] == 0.0 && g[i].abs() > gamma + tol)
            .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()));
        match worst {
            None => return Some(w),
            Some(i) => active.push((i, -g[i].signum())),
        }
    }
    None
}

fn polish_constrained(q: &[f64], c: &[f64], ridge: f64, k: f64, start: &[f64]) -> Option<Vec<f64>> {
    let n = c.len();
    let interior = || {
        let a = DMatrix::from_fn(n, n, |i, j| q[i * n + j] + if i == j { ridge } else { 0.0 });
        let x = lstsq(a, DVector::from_column_slice(c))?;
        let w: Vec<f64> = x.iter().copied().collect();
        (w.iter().map(|v| v.abs()).sum::<f64>() <= k).then_some(w)
    };
    let l1: f64 = start.iter().map(|x| x.abs()).sum();
    if !k.is_finite() || l1 < k * (1.0 - 1e-6) {
        return interior();
    }
    let mut active = signs_of(start);
    for _ in 0..(2 * n + 2) {
        let s = active.len();
        if s == 0 {
            return interior();
        }
        let a = DMatrix::from_fn(s + 1, s + 1, |r, col| match (r < s, col < s) {
            (true, true) => {
                let (i, j) = (active[r].0, active[col].0);
                q[i * n + j] + if i == j { ridge } else { 0.0 }
            }
            (true, false) => active[r].1,
            (false, true) => active[col].1,
            (false, false) => 0.0,
        });
        let b = DVector::from_fn(s + 1, |r, _| if r < s { c[active[r].0] } else { k });
        let x = lstsq(a, b)?;
        let nu = x[s];
        if nu < 0.0 {
            return interior();
        }
        let flipped: Vec<usize> = (0..s).filter(|&r| x[r] * active[r].1 <= 0.0).collect();
        if !flipped.is_empty() {
            let drop: Vec<usize> = flipped.iter().map(|&r| active[r].0).collect();
            active.retain(|(i, _)| !drop.contains(i));
            continue;
        }
        let mut w = vec![0.0; n];
        for (r, &(i, _)) in active.iter().enumerate() {
            w[i] = x[r];
        }
        let g = gradient_of(q, c, ridge, &w);
        let tol = 1e-12 * (1.0 + nu);
        let worst = (0..n)
            .filter(|&i| w[i] == 0.0 && g[i].abs() > nu + tol)
            .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()));
        match worst {
            None => return Some(w),
            Some(i) => active.push((i, -g[i].signum())),
        }
    }
    None
}

fn finish(
    run: Iterated,
    objective: impl Fn(&[f64]) -> f64,
    kkt: impl Fn(&[f64]) -> f64,
    polished: Option<Vec<f64>>,
) -> SolveReport {
    let mut report = SolveReport {
        kkt_violation: kkt(&run.weights),
        weights: run.weights,
        objective: run.objective,
        iterations: run.iterations,
        converged: run.converged,
        residual_norm: None,
        polished: false,
        objective_trace: run.trace,
    };
    if let Some(candidate) = polished {
        let value = objective(&candidate);
        let violation = kkt(&candidate);
        let slack = 1e-12 * report.objective.abs().max(1.0);
        if value <= report.objective + slack && violation <= report.kkt_violation {
            report.weights = candidate;
            report.objective = value;
            report.kkt_violation = violation;
            report.polished = true;
            report.converged = true;
            if !report.objective_trace.is_empty() {
                report.objective_trace.push(value);
            }
        }
    }
    report
}

/// Minimizes `1/2 w'(Q + ridge I)w - c'w` subject to `||w||_1 <= k_budget`.
/// `Q` is row-major `N x N`; `k_budget` may be infinite.
pub fn solve_constrained(
    q: &[f64],
    c: &[f64],
    k_budget: f64,
    cfg: &SolveConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    validate_gram(q, c)?;
    if !(k_budget > 0.0) {
        return Err(Error::Validation("k_budget must be > 0".into()));
    }
    let f = GramObjective {
        q,
        c,
        ridge: cfg.ridge,
    };
    let run = accelerated(&f, Regularizer::Ball(k_budget), cfg)?;
    let polished = cfg
        .polish
        .then(|| polish_constrained(q, c, cfg.ridge, k_budget, &run.weights))
        .flatten();
    Ok(finish(
        run,
        |w| f.value(w),
        |w| constrained_kkt_violation(q, c, cfg.ridge, k_budget, w),
        polished,
    ))
}

/// Minimizes `1/2 w'(Q + ridge I)w - c'w + gamma ||w||_1`.
pub fn solve_penalized(q: &[f64], c: &[f64], gamma: f64, cfg: &SolveConfig) -> Result<SolveReport> {
    cfg.validate()?;
    validate_gram(q, c)?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Validation("gamma must be finite and > 0".into()));
    }
    let f = GramObjective {
        q,
        c,
        ridge: cfg.ridge,
    };
    let reg = Regularizer::L1(gamma);
    let run = accelerated(&f, reg, cfg)?;
    let polished = cfg
        .polish
        .then(|| polish_penalized(q, c, cfg.ridge, gamma, &run.weights))
        .flatten();
    Ok(finish(
        run,
        |w| f.value(w) + reg.value(w),
        |w| penalized_kkt_violation(q, c, cfg.ridge, gamma, w),
        polished,
    ))
}

/// Minimizes `1/2 ||Gw - lambda g_tar||^2 + ridge/2 ||w||^2` over the l1 ball
/// using only products with `G` and `G'`. The reported objective is this
/// least-squares value, which exceeds the Gram-space objective with
/// `c = lambda beta` by exactly `1/2 lambda^2 ||g_tar||^2`.
pub fn solve_gradient_space(
    set: &GradientSet,
    k_budget: f64,
    cfg: &SolveConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    if !(k_budget > 0.0) {
        return Err(Error::Validation("k_budget must be > 0".into()));
    }
    let f = LeastSquaresObjective {
        set,
        scaled_target: set.target().iter().map(|t| cfg.lambda * t).collect(),
        ridge: cfg.ridge,
    };
    let run = accelerated(&f, Regularizer::Ball(k_budget), cfg)?;
    let kkt = ball_kkt(&f.gradient(&run.weights), &run.weights, k_budget);
    let residual = f.residual(&run.weights);
    Ok(SolveReport {
        residual_norm: Some(dot(&residual, &residual).sqrt()),
        kkt_violation: kkt,
        weights: run.weights,
        objective: run.objective,
        iterations: run.iterations,
        converged: run.converged,
        polished: false,
        objective_trace: run.trace,
    })
}

/// `||Gw - lambda g_tar||_2` for weights over the rows of `set`.
pub fn residual_norm(set: &GradientSet, weights: &[f64], lambda: f64) -> f64 {
    let f = LeastSquaresObjective {
        set,
        scaled_target: set.target().iter().map(|t| lambda * t).collect(),
        ridge: 0.0,
    };
    let r = f.residual(weights);
    dot(&r, &r).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::RepresentationKind;

    fn example_set() -> GradientSet {
        GradientSet::new(
            vec!["g1".into(), "g2".into(), "g3".into()],
            vec![vec![1.0, 0.1], vec![1.0, 0.1], vec![0.0, 1.0]],
            vec![1.0, 1.0],
            RepresentationKind::OneStepGradient,
        )
        .unwrap()
    }

    fn example_gram() -> (Vec<f64>, Vec<f64>) {
        let g = crate::gram::compute_gram(&example_set());
        (g.k_matrix().to_vec(), g.beta().to_vec())
    }

    #[test]
    fn projection_cases() {
        assert_eq!(project_l1_ball(&[3.0, 0.0], 1.0), vec![1.0, 0.0]);
        assert_eq!(project_l1_ball(&[2.0, 1.0], 1.0), vec![1.0, 0.0]);
        assert_eq!(project_l1_ball(&[0.2, -0.3], 1.0), vec![0.2, -0.3]);
        let p = project_l1_ball(&[1.0, 1.0, -1.0], 1.5);
        assert!((p.iter().map(|x| x.abs()).sum::<f64>() - 1.5).abs() < 1e-15);
        assert_eq!(p, vec![0.5, 0.5, -0.5]);
    }

    #[test]
    fn projection_matches_grid_search() {
        // exhaustive search over the 2-d ball at 1e-3 resolution
        let v = [2.0, 1.0];
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        let steps = 2000;
        for a in -steps..=steps {
            let x = a as f64 / 1000.0 * 0.5;
            let rem = 1.0 - x.abs();
            if rem < 0.0 {
                continue;
            }
            let mut b = -rem;
            while b <= rem + 1e-12 {
                let d = (x - v[0]).powi(2) + (b - v[1]).powi(2);
                if d < best.0 {
                    best = (d, [x, b]);
                }
                b += 1e-3;
            }
        }
        let p = project_l1_ball(&v, 1.0);
        assert!((p[0] - best.1[0]).abs() <= 1e-3 && (p[1] - best.1[1]).abs() <= 1e-3);
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(&[0.3, -0.7], 0.0), vec![0.3, -0.7]);
        let out = soft_threshold(&[0.3, -0.7], 0.5);
        assert_eq!(out[0], 0.0);
        assert!((out[1] + 0.2).abs() < 1e-15);
        assert_eq!(soft_threshold(&[0.1, -0.2], 0.5), vec![0.0, 0.0]);
    }

    #[test]
    fn worked_example_constrained() {
        let (k, beta) = example_gram();
        let report = solve_constrained(&k, &beta, 1.9, &SolveConfig::default()).unwrap();
        let w = &report.weights;
        assert!((w[2] - 0.9).abs() < 1e-6, "{w:?}");
        assert!((w[0] + w[1] - 1.0).abs() < 1e-6, "{w:?}");
        assert!(residual_norm(&example_set(), w, 1.0) <= 1e-6);
        assert!(report.converged);
    }

    #[test]
    fn identity_q_with_loose_budget_returns_c() {
        let q = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let c = [0.4, -1.2, 0.7];
        let report = solve_constrained(&q, &c, 10.0, &SolveConfig::default()).unwrap();
        for (a, b) in report.weights.iter().zip(&c) {
            assert!((a - b).abs() < 1e-9);
        }
        let inf = solve_constrained(&q, &c, f64::INFINITY, &SolveConfig::default()).unwrap();
        for (a, b) in inf.weights.iter().zip(&c) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_q_lands_on_best_vertex() {
        let q = [0.0; 16];
        let c = [0.3, -1.4, 0.9, 1.1];
        let k = 2.5;
        let report = solve_constrained(&q, &c, k, &SolveConfig::default()).unwrap();
        // enumerate all signed vertices of the ball
        let mut best = (f64::INFINITY, 0usize, 0.0f64);
        for (j, &cj) in c.iter().enumerate() {
            for s in [-1.0, 1.0] {
                let value = -cj * s * k;
                if value < best.0 {
                    best = (value, j, s);
                }
            }
        }
        let mut expected = [0.0; 4];
        expected[best.1] = best.2 * k;
        assert_eq!(report.weights, expected.to_vec());
    }

    #[test]
    fn penalized_identity_is_soft_threshold() {
        let q = [1.0, 0.0, 0.0, 1.0];
        let c = [0.9, -0.05];
        let report = solve_penalized(&q, &c, 0.1, &SolveConfig::default()).unwrap();
        let expected = soft_threshold(&c, 0.1);
        for (a, b) in report.weights.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let zero = solve_penalized(&q, &c, 1.0, &SolveConfig::default()).unwrap();
        assert_eq!(zero.weights, vec![0.0, 0.0]);
    }

    #[test]
    fn penalized_example_against_grid() {
        let (k, beta) = example_gram();
        let gamma = 0.01;
        let report = solve_penalized(&k, &beta, gamma, &SolveConfig::default()).unwrap();
        let objective = |w: [f64; 3]| {
            let mut quad = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    quad += w[i] * k[i * 3 + j] * w[j];
                }
            }
            0.5 * quad - (beta[0] * w[0] + beta[1] * w[1] + beta[2] * w[2])
                + gamma * (w[0].abs() + w[1].abs() + w[2].abs())
        };
        let mut best = f64::INFINITY;
        for a in -200..=200 {
            for b in -200..=200 {
                for c in -200..=200 {
                    best = best.min(objective([
                        a as f64 / 100.0,
                        b as f64 / 100.0,
                        c as f64 / 100.0,
                    ]));
                }
            }
        }
        assert!(report.objective <= best + 1e-12);
        // the solver value can beat the grid only by what grid resolution allows
        assert!(best - report.objective < 1e-3);
        assert!(report.kkt_violation < 1e-9);
        // stationarity in (w1 + w2, w3) gives w1 + w2 = 1 - 0.9 gamma, w3 = 1 - gamma - 0.1 (w1 + w2)
        let w = &report.weights;
        assert!((w[0] + w[1] - (1.0 - 0.9 * gamma)).abs() < 1e-9, "{w:?}");
        assert!(
            (w[2] - (1.0 - gamma - 0.1 * (1.0 - 0.9 * gamma))).abs() < 1e-9,
            "{w:?}"
        );
    }

    #[test]
    fn gradient_space_worked_example() {
        let report = solve_gradient_space(&example_set(), 1.9, &SolveConfig::default()).unwrap();
        assert!(report.residual_norm.unwrap() <= 1e-6, "{report:?}");
    }

    #[test]
    fn gradient_space_zero_target() {
        let set = GradientSet::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
            vec![0.0, 0.0],
            RepresentationKind::OneStepGradient,
        )
        .unwrap();
        let report = solve_gradient_space(&set, 3.0, &SolveConfig::default()).unwrap();
        assert_eq!(report.weights, vec![0.0, 0.0]);
        assert!(report.converged);
    }

    #[test]
    fn gradient_space_single_exact_match() {
        let set = GradientSet::new(
            vec!["a".into()],
            vec![vec![0.3, -0.4, 1.2]],
            vec![0.3, -0.4, 1.2],
            RepresentationKind::OneStepGradient,
        )
        .unwrap();
        let report = solve_gradient_space(&set, 1.5, &SolveConfig::default()).unwrap();
        assert!((report.weights[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn asymmetric_q_rejected() {
        let q = [1.0, 0.5, 0.2, 1.0];
        let err = solve_constrained(&q, &[1.0, 1.0], 1.0, &SolveConfig::default()).unwrap_err();
        assert_eq!(err.name(), "ValidationError");
    }

    #[test]
    fn nan_rejected() {
        let q = [1.0, f64::NAN, f64::NAN, 1.0];
        let err = solve_penalized(&q, &[1.0, 1.0], 0.1, &SolveConfig::default()).unwrap_err();
        assert_eq!(err.name(), "NumericError");
    }

    #[test]
    fn trace_is_monotone() {
        let (k, beta) = example_gram();
        let cfg = SolveConfig {
            record_trace: true,
            polish: false,
            ..SolveConfig::default()
        };
        let report = solve_constrained(&k, &beta, 1.9, &cfg).unwrap();
        assert!(report.objective_trace.len() > 2);
        for pair in report.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }
}
