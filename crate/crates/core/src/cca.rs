//! Regularized normalized CCA between two views, cosine scoring, and the
//! minibatch correlation objective with its analytic gradient.
//!
//! `fit_cca` solves the whitened generalized eigenvalue problem directly:
//! eigenvectors of `Sxx^-1/2 Sxy Syy^-1 Syx Sxx^-1/2` give the region
//! projection, and the phrase projection is recovered through
//! `Syy^-1 Syx`. `dcca_objective` takes the SVD route over a minibatch
//! and returns exact gradients of the sum of the top-k singular values.
//! Covariances use the biased `1/n` estimator plus an optional ridge.

use crate::{quantize, quantize_matrix, quantize_vector};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default exponent for the eigenvalue scaling applied before cosine
/// scoring (normalized CCA).
pub const DEFAULT_SCALE_EXPONENT: f64 = 4.0;

/// Relative eigenvalue floor below which a covariance is treated as
/// singular.
const SINGULAR_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CcaError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("views have {x} and {y} samples; they must be paired")]
    SampleMismatch { x: usize, y: usize },
    #[error("embedding size {k} out of range 1..={max}")]
    InvalidK { k: usize, max: usize },
    #[error("ridge regularizer must be non-negative, got {0}")]
    NegativeRidge(f64),
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("covariance of the {view} view is singular; increase the ridge")]
    SingularCovariance { view: &'static str },
    #[error("canonical component {component} is degenerate (zero correlation mass)")]
    DegenerateComponent { component: usize },
}

/// A cosine-similarity score plus a degeneracy flag for zero-norm
/// projections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScore {
    pub value: f64,
    pub degenerate: bool,
}

impl SimilarityScore {
    pub fn ok(value: f64) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }

    pub fn degenerate(value: f64) -> Self {
        Self {
            value,
            degenerate: true,
        }
    }
}

/// Fitted CCA: paired projections, view means, canonical correlations in
/// descending order, and the scaling exponent used at score time.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaSolution {
    wx: DMatrix<f64>,
    wy: DMatrix<f64>,
    correlations: DVector<f64>,
    mu_x: DVector<f64>,
    mu_y: DVector<f64>,
    scale_exponent: f64,
}

impl CcaSolution {
    pub fn from_parts(
        wx: DMatrix<f64>,
        wy: DMatrix<f64>,
        correlations: DVector<f64>,
        mu_x: DVector<f64>,
        mu_y: DVector<f64>,
        scale_exponent: f64,
    ) -> Self {
        Self {
            wx,
            wy,
            correlations,
            mu_x,
            mu_y,
            scale_exponent,
        }
    }

    /// Region projection, `d_x x k`.
    pub fn wx(&self) -> &DMatrix<f64> {
        &self.wx
    }

    /// Phrase projection, `d_y x k`.
    pub fn wy(&self) -> &DMatrix<f64> {
        &self.wy
    }

    pub fn correlations(&self) -> &DVector<f64> {
        &self.correlations
    }

    pub fn mu_x(&self) -> &DVector<f64> {
        &self.mu_x
    }

    pub fn mu_y(&self) -> &DVector<f64> {
        &self.mu_y
    }

    pub fn embedding_size(&self) -> usize {
        self.correlations.len()
    }

    pub fn scale_exponent(&self) -> f64 {
        self.scale_exponent
    }

    pub fn with_scale_exponent(mut self, p: f64) -> Self {
        assert!(p >= 0.0, "scale exponent must be non-negative");
        self.scale_exponent = p;
        self
    }

    /// `diag(rho^p)` applied at score time.
    pub fn scales(&self) -> DVector<f64> {
        self.correlations.map(|r| r.powf(self.scale_exponent))
    }

    /// Project a region vector: `diag(rho^p) Wx^T (x - mu_x)`.
    pub fn project_region(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut z = self.wx.tr_mul(&(x - &self.mu_x));
        z.component_mul_assign(&self.scales());
        z
    }

    /// Project a phrase vector: `diag(rho^p) Wy^T (y - mu_y)`.
    pub fn project_phrase(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut z = self.wy.tr_mul(&(y - &self.mu_y));
        z.component_mul_assign(&self.scales());
        z
    }

    /// Cosine similarity between the scaled projections of `x` and `y`.
    pub fn score(&self, x: &DVector<f64>, y: &DVector<f64>) -> SimilarityScore {
        cosine(&self.project_region(x), &self.project_phrase(y))
    }
}

pub(crate) fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> SimilarityScore {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return SimilarityScore::degenerate(0.0);
    }
    SimilarityScore::ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Score a region/phrase pair under a fitted solution.
pub fn cca_score(sol: &CcaSolution, x: &DVector<f64>, y: &DVector<f64>) -> SimilarityScore {
    sol.score(x, y)
}

/// Suggested ridge for a view: `1e-4 * trace(cov) / d`.
pub fn suggested_ridge(view: &DMatrix<f64>) -> f64 {
    let (n, d) = view.shape();
    if n == 0 || d == 0 {
        return 0.0;
    }
    let means = column_means(view);
    let mut trace = 0.0;
    for j in 0..d {
        let col = view.column(j);
        trace += col.iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / n as f64;
    }
    1e-4 * trace / d as f64
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn center_columns(m: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mean) in means.iter().enumerate() {
        for v in out.column_mut(j).iter_mut() {
            *v -= mean;
        }
    }
    out
}

/// Biased covariance `A^T B / n` of centered matrices.
fn covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.tr_mul(b) / a.nrows() as f64
}

struct SymEigen {
    /// Eigenvalues in descending order.
    values: DVector<f64>,
    /// Matching eigenvectors as columns.
    vectors: DMatrix<f64>,
}

fn sym_eigen_sorted(m: &DMatrix<f64>) -> SymEigen {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    SymEigen { values, vectors }
}

/// `m^-1/2` and `m^-1` for a symmetric positive definite matrix.
fn inv_sqrt_and_inv(
    m: &DMatrix<f64>,
    view: &'static str,
) -> Result<(DMatrix<f64>, DMatrix<f64>), CcaError> {
    let eig = sym_eigen_sorted(m);
    let max = eig.values[0].max(0.0);
    if max <= 0.0 || eig.values[eig.values.len() - 1] <= SINGULAR_RTOL * max {
        return Err(CcaError::SingularCovariance { view });
    }
    let q = &eig.vectors;
    let inv_sqrt_vals = eig.values.map(|v| 1.0 / v.sqrt());
    let inv_vals = eig.values.map(|v| 1.0 / v);
    let scale = |vals: &DVector<f64>| {
        let mut scaled = q.clone();
        for (j, s) in vals.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        scaled * q.transpose()
    };
    Ok((scale(&inv_sqrt_vals), scale(&inv_vals)))
}

fn check_inputs(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    k: usize,
    ridge: f64,
) -> Result<(), CcaError> {
    if x.nrows() != y.nrows() {
        return Err(CcaError::SampleMismatch {
            x: x.nrows(),
            y: y.nrows(),
        });
    }
    if x.nrows() < 2 {
        return Err(CcaError::TooFewSamples(x.nrows()));
    }
    let max = x.ncols().min(y.ncols());
    if k == 0 || k > max {
        return Err(CcaError::InvalidK { k, max });
    }
    if ridge < 0.0 {
        return Err(CcaError::NegativeRidge(ridge));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(CcaError::NonFinite);
    }
    Ok(())
}

fn add_ridge(mut m: DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    for i in 0..m.nrows() {
        m[(i, i)] += eps;
    }
    m
}

/// Fit regularized CCA between paired views.
///
/// `x` is `n x d_x` (regions), `y` is `n x d_y` (phrases), one sample per
/// row. Returns the top-`k` canonical pairs with correlations clipped to
/// `[0, 1]`, whitened so that `Wx^T Sxx Wx = Wy^T Syy Wy = I` on the
/// training covariances. Each pair's sign is chosen so the
/// largest-magnitude entry of the region column is positive.
pub fn fit_cca(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    k: usize,
    eps: f64,
) -> Result<CcaSolution, CcaError> {
    check_inputs(x, y, k, eps)?;
    let n = x.nrows();
    let mu_x = column_means(x);
    let mu_y = column_means(y);
    let xc = center_columns(x, &mu_x);
    let yc = center_columns(y, &mu_y);

    let sxx = add_ridge(covariance(&xc, &xc), eps);
    let syy = add_ridge(covariance(&yc, &yc), eps);
    let sxy = covariance(&xc, &yc);

    let (pxx, _) = inv_sqrt_and_inv(&sxx, "region")?;
    let (_, syy_inv) = inv_sqrt_and_inv(&syy, "phrase")?;

    // M = Sxx^-1/2 Sxy Syy^-1 Syx Sxx^-1/2, symmetric PSD with
    // eigenvalues rho^2.
    let cross = &pxx * &sxy; // d_x x d_y
    let m = &cross * &syy_inv * cross.transpose();
    let eig = sym_eigen_sorted(&m);

    let mut wx = DMatrix::zeros(x.ncols(), k);
    let mut wy = DMatrix::zeros(y.ncols(), k);
    let mut correlations = DVector::zeros(k);
    let syx = sxy.transpose();
    for i in 0..k {
        let lambda = eig.values[i].max(0.0);
        let rho = lambda.sqrt().min(1.0);
        let wx_i = &pxx * eig.vectors.column(i);
        // Recover the phrase direction through Syy^-1 Syx and normalize it
        // to unit Syy-metric length: the squared metric length of the raw
        // direction equals lambda.
        let raw = &syy_inv * (&syx * &wx_i);
        let metric = (raw.transpose() * &syy * &raw)[(0, 0)];
        if !(metric.is_finite() && metric > 0.0) {
            return Err(CcaError::DegenerateComponent { component: i });
        }
        let wy_i = raw / metric.sqrt();
        wx.set_column(i, &wx_i);
        wy.set_column(i, &wy_i);
        correlations[i] = rho;
    }

    // Deterministic signs: flip each pair together so the region column's
    // largest-magnitude entry is positive, preserving positive
    // correlations.
    for i in 0..k {
        let col = wx.column(i);
        let lead = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(idx, _)| idx)
            .unwrap_or(0);
        if wx[(lead, i)] < 0.0 {
            wx.column_mut(i).neg_mut();
            wy.column_mut(i).neg_mut();
        }
    }

    let mut mu_x = mu_x;
    let mut mu_y = mu_y;
    quantize_matrix(&mut wx);
    quantize_matrix(&mut wy);
    quantize_vector(&mut correlations);
    quantize_vector(&mut mu_x);
    quantize_vector(&mut mu_y);
    let _ = n;
    Ok(CcaSolution {
        wx,
        wy,
        correlations,
        mu_x,
        mu_y,
        scale_exponent: DEFAULT_SCALE_EXPONENT,
    })
}

/// Value and exact gradients of the minibatch correlation objective.
#[derive(Debug, Clone)]
pub struct DccaOutcome {
    /// Sum of the top-k singular values of the whitened cross-covariance.
    pub corr: f64,
    pub grad_x: DMatrix<f64>,
    pub grad_y: DMatrix<f64>,
}

/// Deep-CCA correlation objective over one minibatch.
///
/// `corr` is the sum of the top-`k` singular values of
/// `T = (Sxx + r1 I)^-1/2 Sxy (Syy + r2 I)^-1/2`; the gradients with
/// respect to every batch entry are the exact analytic gradients of that
/// value. A rank-deficient covariance with a zero ridge is reported as a
/// stability error.
pub fn dcca_objective(
    xb: &DMatrix<f64>,
    yb: &DMatrix<f64>,
    r1: f64,
    r2: f64,
    k: usize,
) -> Result<DccaOutcome, CcaError> {
    check_inputs(xb, yb, k, r1.min(r2))?;
    let n = xb.nrows() as f64;
    let mu_x = column_means(xb);
    let mu_y = column_means(yb);
    let xc = center_columns(xb, &mu_x);
    let yc = center_columns(yb, &mu_y);

    let sxx = add_ridge(covariance(&xc, &xc), r1);
    let syy = add_ridge(covariance(&yc, &yc), r2);
    let sxy = covariance(&xc, &yc);

    let (pxx, _) = inv_sqrt_and_inv(&sxx, "region")?;
    let (pyy, _) = inv_sqrt_and_inv(&syy, "phrase")?;

    let t = &pxx * &sxy * &pyy;
    let svd = t.clone().svd(true, true);
    let u_full = svd.u.as_ref().expect("svd with u");
    let vt_full = svd.v_t.as_ref().expect("svd with v_t");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("finite singular values")
    });
    let top = &order[..k];

    let corr: f64 = top.iter().map(|&i| svd.singular_values[i]).sum();

    let u_k = DMatrix::from_columns(
        &top.iter()
            .map(|&i| u_full.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    let v_k = DMatrix::from_columns(
        &top.iter()
            .map(|&i| vt_full.row(i).transpose())
            .collect::<Vec<_>>(),
    );
    let s_k = DMatrix::from_diagonal(&DVector::from_iterator(
        k,
        top.iter().map(|&i| svd.singular_values[i]),
    ));

    // Envelope-theorem gradients of the top-k nuclear mass:
    //   d corr / d Sxy =  Pxx Uk Vk^T Pyy
    //   d corr / d Sxx = -1/2 Pxx Uk Sk Uk^T Pxx   (and symmetrically for Syy)
    let g12 = &pxx * &u_k * v_k.transpose() * &pyy;
    let g11 = -0.5 * (&pxx * &u_k * &s_k * u_k.transpose() * &pxx);
    let g22 = -0.5 * (&pyy * &v_k * &s_k * v_k.transpose() * &pyy);

    // Chain through the 1/n covariances; the centering projector is a
    // no-op on products of centered matrices.
    let grad_x = (2.0 * &xc * &g11 + &yc * g12.transpose()) / n;
    let grad_y = (2.0 * &yc * &g22 + &xc * &g12) / n;

    Ok(DccaOutcome {
        corr,
        grad_x,
        grad_y,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn identity_views_have_unit_correlations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 40, 5);
        let sol = fit_cca(&x, &x, 5, 0.0).unwrap();
        for i in 0..5 {
            assert_relative_eq!(sol.correlations()[i], 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn correlations_are_sorted_and_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_matrix(&mut rng, 60, 6);
        let y = random_matrix(&mut rng, 60, 4);
        let sol = fit_cca(&x, &y, 4, 0.0).unwrap();
        let c = sol.correlations();
        for i in 0..c.len() {
            assert!(c[i] >= 0.0 && c[i] <= 1.0 + 1e-8);
            if i > 0 {
                assert!(c[i] <= c[i - 1] + 1e-12);
            }
        }
    }

    #[test]
    fn whitening_constraint_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(&mut rng, 80, 6);
        let y = random_matrix(&mut rng, 80, 5);
        let sol = fit_cca(&x, &y, 4, 0.0).unwrap();

        let mu_x = column_means(&x);
        let xc = center_columns(&x, &mu_x);
        let sxx = covariance(&xc, &xc);
        let gram = sol.wx().transpose() * sxx * sol.wx();
        let dev = (&gram - DMatrix::<f64>::identity(4, 4)).norm();
        assert!(dev < 1e-5, "whitening deviation {dev}");

        let mu_y = column_means(&y);
        let yc = center_columns(&y, &mu_y);
        let syy = covariance(&yc, &yc);
        let gram_y = sol.wy().transpose() * syy * sol.wy();
        let dev_y = (&gram_y - DMatrix::<f64>::identity(4, 4)).norm();
        assert!(dev_y < 1e-5, "phrase whitening deviation {dev_y}");
    }

    #[test]
    fn training_pair_scores_one_under_identity_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_matrix(&mut rng, 30, 4);
        let sol = fit_cca(&x, &x, 4, 0.0).unwrap();
        let row = x.row(3).transpose();
        let score = sol.score(&row, &row);
        assert!(!score.degenerate);
        assert_relative_eq!(score.value, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn antipodal_projections_score_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 30, 4);
        let sol = fit_cca(&x, &x, 4, 0.0).unwrap();
        // Construct y so its centered part is the negation of x's.
        let row = x.row(5).transpose();
        let mirrored = sol.mu_y() * 2.0 - &row;
        let score = sol.score(&row, &mirrored);
        assert_relative_eq!(score.value, -1.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_projection_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_matrix(&mut rng, 30, 4);
        let sol = fit_cca(&x, &x, 4, 0.0).unwrap();
        let score = sol.score(&sol.mu_x().clone(), &x.row(0).transpose());
        assert!(score.degenerate);
        assert_eq!(score.value, 0.0);
    }

    #[test]
    fn invariant_under_invertible_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_matrix(&mut rng, 100, 5);
        let y = random_matrix(&mut rng, 100, 4);
        let base = fit_cca(&x, &y, 3, 0.0).unwrap();

        // Well-conditioned invertible transform of the region view.
        let a = DMatrix::<f64>::identity(5, 5) + 0.3 * random_matrix(&mut rng, 5, 5);
        let xt = &x * &a;
        let transformed = fit_cca(&xt, &y, 3, 0.0).unwrap();
        for i in 0..3 {
            assert_relative_eq!(
                base.correlations()[i],
                transformed.correlations()[i],
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = DMatrix::<f64>::zeros(1, 3);
        assert!(matches!(
            fit_cca(&x, &x, 1, 0.0),
            Err(CcaError::TooFewSamples(1))
        ));
        let x = DMatrix::<f64>::zeros(10, 3);
        let y = DMatrix::<f64>::zeros(10, 2);
        assert!(matches!(
            fit_cca(&x, &y, 3, 0.0),
            Err(CcaError::InvalidK { .. })
        ));
        // all-zero data is singular at eps = 0
        assert!(matches!(
            fit_cca(&x, &y, 2, 0.0),
            Err(CcaError::SingularCovariance { .. })
        ));
    }

    #[test]
    fn dcca_identity_views_reach_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_matrix(&mut rng, 50, 4);
        let out = dcca_objective(&x, &x, 0.0, 0.0, 3).unwrap();
        assert_relative_eq!(out.corr, 3.0, epsilon = 1e-8);
    }

    #[test]
    fn dcca_matches_fit_cca_correlation_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random_matrix(&mut rng, 60, 5);
        let y = random_matrix(&mut rng, 60, 4);
        for &(k, ridge) in &[(4usize, 0.0f64), (2, 1e-3), (3, 1e-2)] {
            let sol = fit_cca(&x, &y, k, ridge).unwrap();
            let out = dcca_objective(&x, &y, ridge, ridge, k).unwrap();
            assert_relative_eq!(out.corr, sol.correlations().sum(), epsilon = 1e-6);
        }
    }

    #[test]
    fn dcca_singular_with_zero_ridge_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let thin = random_matrix(&mut rng, 30, 2);
        // Rank-2 data embedded in 4 columns.
        let pad = DMatrix::from_fn(30, 4, |r, c| thin[(r, c % 2)]);
        let y = random_matrix(&mut rng, 30, 3);
        assert!(matches!(
            dcca_objective(&pad, &y, 0.0, 1e-4, 2),
            Err(CcaError::SingularCovariance { view: "region" })
        ));
        assert!(dcca_objective(&pad, &y, 1e-4, 1e-4, 2).is_ok());
    }

    #[test]
    fn dcca_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 20;
        let x = random_matrix(&mut rng, n, 4);
        let y = random_matrix(&mut rng, n, 3);
        let (r1, r2, k) = (1e-2, 1e-2, 2);
        let base = dcca_objective(&x, &y, r1, r2, k).unwrap();
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for _ in 0..60 {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..4));
            let mut xp = x.clone();
            xp[(i, j)] += h;
            let mut xm = x.clone();
            xm[(i, j)] -= h;
            let fd = (dcca_objective(&xp, &y, r1, r2, k).unwrap().corr
                - dcca_objective(&xm, &y, r1, r2, k).unwrap().corr)
                / (2.0 * h);
            let an = base.grad_x[(i, j)];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        for _ in 0..60 {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..3));
            let mut yp = y.clone();
            yp[(i, j)] += h;
            let mut ym = y.clone();
            ym[(i, j)] -= h;
            let fd = (dcca_objective(&x, &yp, r1, r2, k).unwrap().corr
                - dcca_objective(&x, &ym, r1, r2, k).unwrap().corr)
                / (2.0 * h);
            let an = base.grad_y[(i, j)];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    }

    #[test]
    fn suggested_ridge_scales_with_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = random_matrix(&mut rng, 50, 4);
        let r1 = suggested_ridge(&x);
        let r4 = suggested_ridge(&(&x * 2.0));
        assert_relative_eq!(r4, 4.0 * r1, epsilon = 1e-12);
    }
}
