//! Gram systems `(K, beta)` and curvature-weighted representations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::{dot, l2_norm, GradientSet, PerExampleStore, RepresentationKind};

/// Inner product under which a [`GramSystem`] was built.
#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Euclidean,
    /// Diagonal curvature `M`; inner products are `<M^{1/2} g_i, M^{1/2} g_j>`.
    Curvature(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramSystem {
    n: usize,
    k_matrix: Vec<f64>,
    beta: Vec<f64>,
    names: Vec<String>,
    metric: Metric,
    normalized: bool,
}

impl GramSystem {
    /// Assembles a system from explicit parts. `k_matrix` is row-major `N x N`
    /// and must be exactly symmetric.
    pub fn from_parts(k_matrix: Vec<f64>, beta: Vec<f64>, names: Vec<String>) -> Result<Self> {
        let n = beta.len();
        if k_matrix.len() != n * n || names.len() != n {
            return Err(Error::Shape(format!(
                "K has {} entries, beta {n}, names {}",
                k_matrix.len(),
                names.len()
            )));
        }
        if k_matrix.iter().chain(&beta).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("Gram system entry".into()));
        }
        for i in 0..n {
            for j in 0..i {
                if k_matrix[i * n + j] != k_matrix[j * n + i] {
                    return Err(Error::Validation(format!(
                        "K is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self {
            n,
            k_matrix,
            beta,
            names,
            metric: Metric::Euclidean,
            normalized: false,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self, i: usize, j: usize) -> f64 {
        self.k_matrix[i * self.n + j]
    }

    /// Row-major `N x N` Gram matrix.
    pub fn k_matrix(&self) -> &[f64] {
        &self.k_matrix
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Randomized positive-semidefiniteness probe: `v^T K v >= -tol` for
    /// `samples` Gaussian directions, with `tol = 1e-9 |v|^2 max|K_ij|`.
    pub fn is_psd_sampled(&self, samples: usize, seed: u64) -> bool {
        let scale = self.k_matrix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = vec![0.0; self.n];
        (0..samples).all(|_| {
            v.iter_mut()
                .for_each(|x| *x = rng.sample(rand_distr::StandardNormal));
            let quad: f64 = (0..self.n)
                .map(|i| v[i] * dot(&self.k_matrix[i * self.n..(i + 1) * self.n], &v))
                .sum();
            quad >= -1e-9 * dot(&v, &v) * scale
        })
    }
}

/// Euclidean Gram matrix and alignment vector. Each unordered pair is
/// computed once and mirrored, so `K` is exactly symmetric.
pub fn compute_gram(set: &GradientSet) -> GramSystem {
    let n = set.n_datasets();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| dot(set.row(i), set.row(j))).collect())
        .collect();
    let mut k_matrix = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            k_matrix[i * n + j] = v;
            k_matrix[j * n + i] = v;
        }
    }
    let beta = set.rows().map(|g| dot(g, set.target())).collect();
    GramSystem {
        n,
        k_matrix,
        beta,
        names: set.names().to_vec(),
        metric: Metric::Euclidean,
        normalized: false,
    }
}

/// Gram system of the unit-normalized rows and target.
pub fn compute_gram_normalized(set: &GradientSet) -> Result<GramSystem> {
    let mut gram = compute_gram(&set.normalized()?);
    gram.normalized = true;
    Ok(gram)
}

/// Gram system under a diagonal curvature metric.
pub fn compute_gram_curved(set: &GradientSet, curv: &CurvatureSpec) -> Result<GramSystem> {
    let mut gram = compute_gram(&apply_curvature(set, curv)?);
    gram.metric = Metric::Curvature(curv.diag_m.clone());
    Ok(gram)
}

/// Cosine similarity of every row with the target.
pub fn cosine_scores(set: &GradientSet) -> Result<Vec<f64>> {
    let tnorm = l2_norm(set.target());
    if tnorm == 0.0 {
        return Err(Error::DegenerateVector("target".into()));
    }
    set.rows()
        .zip(set.names())
        .map(|(g, name)| {
            let norm = l2_norm(g);
            if norm == 0.0 {
                return Err(Error::DegenerateVector(name.clone()));
            }
            Ok((dot(g, set.target()) / (norm * tnorm)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Diagonal curvature `M` with a pseudo-inverse cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureSpec {
    diag_m: Vec<f64>,
    epsilon_pinv: f64,
}

impl CurvatureSpec {
    /// Uses a cutoff of `1e-12 * max(diag)`.
    pub fn new(diag_m: Vec<f64>) -> Result<Self> {
        let max = diag_m.iter().fold(0.0f64, |m, v| m.max(*v));
        Self::with_cutoff(diag_m, 1e-12 * max)
    }

    pub fn with_cutoff(diag_m: Vec<f64>, epsilon_pinv: f64) -> Result<Self> {
        if let Some(j) = diag_m.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!(
                "curvature entry {j} is {} (must be finite and >= 0)",
                diag_m[j]
            )));
        }
        if !(epsilon_pinv >= 0.0 && epsilon_pinv.is_finite()) {
            return Err(Error::Validation(
                "pseudo-inverse cutoff must be >= 0".into(),
            ));
        }
        Ok(Self {
            diag_m,
            epsilon_pinv,
        })
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag_m
    }

    pub fn epsilon_pinv(&self) -> f64 {
        self.epsilon_pinv
    }
}

/// Rows become `M^{1/2} g_i`; the target becomes `M^{+/2} g_tar`, with
/// coordinates at or below the cutoff sent to zero.
pub fn apply_curvature(set: &GradientSet, curv: &CurvatureSpec) -> Result<GradientSet> {
    let d = set.dim();
    if curv.diag_m.len() != d {
        return Err(Error::Shape(format!(
            "curvature has {} entries, vectors have {d}",
            curv.diag_m.len()
        )));
    }
    let roots: Vec<f64> = curv.diag_m.iter().map(|m| m.sqrt()).collect();
    let vectors = set
        .flat()
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&roots).map(|(g, r)| g * r))
        .collect();
    let target = set
        .target()
        .iter()
        .zip(&curv.diag_m)
        .zip(&roots)
        .map(|((t, m), r)| if *m <= curv.epsilon_pinv { 0.0 } else { t / r })
        .collect();
    GradientSet::from_flat(
        set.names().to_vec(),
        vectors,
        target,
        RepresentationKind::Transformed,
    )
}

/// Diagonal empirical Fisher: mean squared component over every stored
/// example of every dataset.
pub fn estimate_diag_fisher(per_example: &PerExampleStore) -> Result<CurvatureSpec> {
    let total = per_example.total_examples();
    if total == 0 {
        return Err(Error::InsufficientPreview(
            "per-example store is empty".into(),
        ));
    }
    let mut diag = vec![0.0; per_example.dim()];
    for i in 0..per_example.n_datasets() {
        for row in per_example.examples(i) {
            diag.iter_mut().zip(row).for_each(|(acc, g)| *acc += g * g);
        }
    }
    diag.iter_mut().for_each(|v| *v /= total as f64);
    CurvatureSpec::new(diag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: Vec<Vec<f64>>, target: Vec<f64>) -> GradientSet {
        let names = (0..rows.len()).map(|i| format!("d{i}")).collect();
        GradientSet::new(names, rows, target, RepresentationKind::OneStepGradient).unwrap()
    }

    fn example() -> GradientSet {
        set(
            vec![vec![1.0, 0.1], vec![1.0, 0.1], vec![0.0, 1.0]],
            vec![1.0, 1.0],
        )
    }

    #[test]
    fn worked_example_gram() {
        let g = compute_gram(&example());
        assert_eq!(g.beta(), &[1.1, 1.1, 1.0]);
        let expected = [1.01, 1.01, 0.1, 1.01, 1.01, 0.1, 0.1, 0.1, 1.0];
        for (a, b) in g.k_matrix().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!(g.is_psd_sampled(1000, 7));
    }

    #[test]
    fn orthogonal_row_has_zero_alignment() {
        let g = compute_gram(&set(vec![vec![1.0, -1.0]], vec![1.0, 1.0]));
        assert_eq!(g.beta(), &[0.0]);
    }

    #[test]
    fn cosine_cases() {
        let s = set(
            vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![1.0, 0.1]],
            vec![1.0, 1.0],
        );
        let c = cosine_scores(&s).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert_eq!(c[1], 0.0);
        let expected = 1.1 / (1.01f64.sqrt() * 2f64.sqrt());
        assert!((c[2] - expected).abs() < 1e-15);
        assert!((c[2] - 0.773_957_299).abs() < 1e-9);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let s = set(vec![vec![1.0, 0.0], vec![0.0, 0.0]], vec![1.0, 1.0]);
        match cosine_scores(&s) {
            Err(Error::DegenerateVector(name)) => assert_eq!(name, "d1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unit_rows_give_cosine_beta() {
        let s = set(
            vec![vec![1.0, 0.0], vec![0.0, -1.0], vec![0.6, 0.8]],
            vec![0.6, 0.8],
        );
        for row in s.rows() {
            assert_eq!(l2_norm(row), 1.0);
        }
        assert_eq!(
            compute_gram(&s).beta(),
            cosine_scores(&s).unwrap().as_slice()
        );
    }

    #[test]
    fn curvature_identity_and_scaling() {
        let s = example();
        let id = CurvatureSpec::new(vec![1.0, 1.0]).unwrap();
        let out = apply_curvature(&s, &id).unwrap();
        assert_eq!(out.flat(), s.flat());
        assert_eq!(out.target(), s.target());
        assert_eq!(out.kind(), RepresentationKind::Transformed);

        let s = set(vec![vec![1.0, 1.0]], vec![1.0, 1.0]);
        let m = CurvatureSpec::new(vec![4.0, 1.0]).unwrap();
        let out = apply_curvature(&s, &m).unwrap();
        assert_eq!(out.row(0), &[2.0, 1.0]);
        assert_eq!(out.target(), &[0.5, 1.0]);
    }

    #[test]
    fn zero_curvature_zeroes_target_coordinate() {
        let s = set(vec![vec![1.0, 1.0]], vec![3.0, 2.0]);
        let m = CurvatureSpec::new(vec![0.0, 1.0]).unwrap();
        let out = apply_curvature(&s, &m).unwrap();
        assert_eq!(out.target(), &[0.0, 2.0]);
        assert_eq!(out.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn negative_curvature_rejected() {
        assert!(matches!(
            CurvatureSpec::new(vec![1.0, -0.5]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn diag_fisher_cases() {
        let one = PerExampleStore::new(2, vec![vec![2.0, 0.0]]).unwrap();
        assert_eq!(estimate_diag_fisher(&one).unwrap().diag(), &[4.0, 0.0]);
        let two = PerExampleStore::new(2, vec![vec![1.0, 1.0], vec![-1.0, 1.0]]).unwrap();
        assert_eq!(estimate_diag_fisher(&two).unwrap().diag(), &[1.0, 1.0]);
        let zeros = PerExampleStore::new(2, vec![vec![0.0; 6]]).unwrap();
        assert_eq!(estimate_diag_fisher(&zeros).unwrap().diag(), &[0.0, 0.0]);
        let empty = PerExampleStore::new(2, vec![vec![], vec![]]).unwrap();
        assert_eq!(
            estimate_diag_fisher(&empty).unwrap_err().name(),
            "InsufficientPreviewError"
        );
    }

    #[test]
    fn from_parts_rejects_asymmetry() {
        let err = GramSystem::from_parts(
            vec![1.0, 0.5, 0.4, 1.0],
            vec![0.0, 0.0],
            vec!["a".into(), "b".into()],
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
