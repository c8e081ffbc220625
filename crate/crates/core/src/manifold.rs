//! Geometry of the normalized Stiefel manifold `S(N, r) = { X ∈ ℝ^{N×r} : XᵀX = N·I_r }`.
//!
//! Only what the gradient flow needs lives here: uniform sampling, projection
//! onto tangent spaces, and the polar retraction. Points carry columns of norm
//! `√N`, so every formula has an extra `1/N` relative to the orthonormal
//! Stiefel manifold.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Smallest eigenvalue accepted by [`symmetric_inverse_sqrt`].
pub const TOL_PD: f64 = 1e-12;

/// Attempts made by [`sample_uniform`] before giving up on a singular `ZᵀZ`.
pub const MAX_SAMPLING_RETRIES: usize = 3;

/// Orthogonality tolerance `‖XᵀX − N·I‖_F ≤ 1e−9·N`.
pub fn tol_orth(n: usize) -> f64 {
    1e-9 * n as f64
}

/// A point of `S(N, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    data: DMatrix<f64>,
}

impl StiefelPoint {
    /// Wraps `data` after checking `N ≥ r ≥ 1` and the orthogonality
    /// invariant at the default tolerance.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        let tol = tol_orth(data.nrows());
        Self::with_tolerance(data, tol)
    }

    pub fn with_tolerance(data: DMatrix<f64>, tol: f64) -> Result<Self> {
        check_dims(data.nrows(), data.ncols())?;
        let defect = orthogonality_defect(&data);
        if !(defect <= tol) {
            return Err(Error::OffManifold { defect, tol });
        }
        Ok(Self { data })
    }

    pub(crate) fn new_unchecked(data: DMatrix<f64>) -> Self {
        Self { data }
    }

    /// `√N · [e_1, …, e_r]`, the canonical spike frame.
    pub fn canonical(n: usize, r: usize) -> Result<Self> {
        check_dims(n, r)?;
        let s = (n as f64).sqrt();
        Ok(Self::new_unchecked(DMatrix::from_fn(n, r, |a, j| {
            if a == j {
                s
            } else {
                0.0
            }
        })))
    }

    /// Ambient dimension `N`.
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    /// Number of columns `r`.
    pub fn r(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// `‖XᵀX − N·I_r‖_F`.
    pub fn defect(&self) -> f64 {
        orthogonality_defect(&self.data)
    }
}

/// A tangent vector at some base point; tangency is checked by
/// [`TangentVector::tangency_defect`], not at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    data: DMatrix<f64>,
}

impl TangentVector {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// `‖XᵀU + UᵀX‖_F` at base point `x`.
    pub fn tangency_defect(&self, x: &StiefelPoint) -> f64 {
        let xtu = x.matrix().transpose() * &self.data;
        (&xtu + xtu.transpose()).norm()
    }
}

fn check_dims(n: usize, r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::InvalidParameter("r must be at least 1".into()));
    }
    if r > n {
        return Err(Error::InvalidParameter(format!(
            "r = {r} exceeds N = {n}"
        )));
    }
    Ok(())
}

pub(crate) fn orthogonality_defect(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows() as f64;
    let mut g = x.transpose() * x;
    for j in 0..g.ncols() {
        g[(j, j)] -= n;
    }
    g.norm()
}

fn symmetric_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !a.is_square() {
        return Err(Error::shape(
            "square matrix",
            format!("{}×{}", a.nrows(), a.ncols()),
        ));
    }
    let scale = a.norm().max(1.0);
    let asymmetry = (a - a.transpose()).norm();
    if asymmetry > 1e-10 * scale {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let sym = (a + a.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym))
}

fn symmetric_apply(
    eig: &SymmetricEigen<f64, nalgebra::Dyn>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    let b = q * d * q.transpose();
    (&b + b.transpose()) * 0.5
}

/// `A^{-1/2}` for symmetric positive-definite `A`, via eigendecomposition.
pub fn symmetric_inverse_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(a)?;
    let min = eig.eigenvalues.min();
    if !(min > TOL_PD) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
    }
    Ok(symmetric_apply(&eig, |l| 1.0 / l.sqrt()))
}

/// `A^{1/2}` for symmetric positive-semidefinite `A`. Eigenvalues in
/// `[-TOL_PD, 0)` are clamped to zero.
pub fn symmetric_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(a)?;
    let min = eig.eigenvalues.min();
    if min < -TOL_PD {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
    }
    Ok(symmetric_apply(&eig, |l| l.max(0.0).sqrt()))
}

fn gaussian_matrix<R: Rng + ?Sized>(n: usize, r: usize, rng: &mut R) -> DMatrix<f64> {
    // Fill column by column so the stream order is independent of nalgebra's layout.
    let mut z = DMatrix::zeros(n, r);
    for j in 0..r {
        for a in 0..n {
            z[(a, j)] = rng.sample(StandardNormal);
        }
    }
    z
}

/// `Z (ZᵀZ/N)^{-1/2}`, the polar factor of `Z` scaled onto `S(N, r)`.
/// A second pass removes the roundoff left by an ill-conditioned `Z`.
fn normalize_columns_polar(z: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = z.nrows() as f64;
    let mut x = z;
    for _ in 0..2 {
        let gram = (x.transpose() * &x) / n;
        x = &x * symmetric_inverse_sqrt(&gram)?;
    }
    Ok(x)
}

/// Draws `X ~ μ_{N×r}` as `X = Z (ZᵀZ/N)^{-1/2}` with `Z` i.i.d. standard
/// Gaussian.
pub fn sample_uniform<R: Rng + ?Sized>(n: usize, r: usize, rng: &mut R) -> Result<StiefelPoint> {
    check_dims(n, r)?;
    let mut last = None;
    for _ in 0..MAX_SAMPLING_RETRIES {
        match normalize_columns_polar(gaussian_matrix(n, r, rng)) {
            Ok(x) => return Ok(StiefelPoint::new_unchecked(x)),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Sampling(format!(
        "ZᵀZ singular after {MAX_SAMPLING_RETRIES} attempts: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Draws `X ~ μ_{N×r}` conditioned on `⟨v_i, x_j⟩ > 0` for every `i, j`, by
/// rejection. The acceptance rate is about `2^{-r²}`; at most `10·2^{r²}`
/// proposals are made.
pub fn sample_conditioned_positive<R: Rng + ?Sized>(
    spikes: &StiefelPoint,
    rng: &mut R,
) -> Result<StiefelPoint> {
    let (n, r) = (spikes.n(), spikes.r());
    if r * r > 20 {
        return Err(Error::InvalidParameter(format!(
            "conditioned-positive sampling needs about 2^{} proposals; r = {r} is too large",
            r * r
        )));
    }
    let attempts = 10usize << (r * r);
    for _ in 0..attempts {
        let x = sample_uniform(n, r, rng)?;
        let vtx = spikes.matrix().transpose() * x.matrix();
        if vtx.iter().all(|&c| c > 0.0) {
            return Ok(x);
        }
    }
    Err(Error::Sampling(format!(
        "no positive-correlation draw in {attempts} attempts"
    )))
}

/// Builds a point whose correlation matrix with `spikes` is exactly `m0`,
/// with the component orthogonal to the spikes drawn at random.
///
/// Requires the singular values of `m0` to be at most 1 and `N ≥ 2r`.
pub fn point_with_correlations<R: Rng + ?Sized>(
    spikes: &StiefelPoint,
    m0: &DMatrix<f64>,
    rng: &mut R,
) -> Result<StiefelPoint> {
    let (n, r) = (spikes.n(), spikes.r());
    if m0.nrows() != r || m0.ncols() != r {
        return Err(Error::shape(
            format!("{r}×{r} correlation matrix"),
            format!("{}×{}", m0.nrows(), m0.ncols()),
        ));
    }
    if n < 2 * r {
        return Err(Error::InvalidParameter(format!(
            "need N ≥ 2r to place an orthogonal complement (N = {n}, r = {r})"
        )));
    }
    let v = spikes.matrix();
    let nf = n as f64;
    let mut deficit = DMatrix::identity(r, r) - m0.transpose() * m0;
    deficit = (&deficit + deficit.transpose()) * 0.5;
    let s = symmetric_sqrt(&deficit).map_err(|_| {
        Error::InvalidParameter("correlation matrix has a singular value above 1".into())
    })?;
    let mut last = None;
    for _ in 0..MAX_SAMPLING_RETRIES {
        let z = gaussian_matrix(n, r, rng);
        let z_perp = &z - v * (v.transpose() * &z) / nf;
        match normalize_columns_polar(z_perp) {
            Ok(q) => {
                let x = v * m0 + q * &s;
                return Ok(StiefelPoint::new_unchecked(x));
            }
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Sampling(format!(
        "complement sampling failed: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Riemannian projection `G − (1/2N)·X·(XᵀG + GᵀX)`.
pub fn project_tangent(x: &StiefelPoint, g: &DMatrix<f64>) -> Result<TangentVector> {
    if g.shape() != x.matrix().shape() {
        return Err(Error::shape(
            format!("{}×{}", x.n(), x.r()),
            format!("{}×{}", g.nrows(), g.ncols()),
        ));
    }
    let xm = x.matrix();
    let xtg = xm.transpose() * g;
    let sym = &xtg + xtg.transpose();
    let data = g - xm * sym / (2.0 * x.n() as f64);
    Ok(TangentVector { data })
}

/// Polar retraction `R_X(U) = (X+U)·((X+U)ᵀ(X+U)/N)^{-1/2}`.
///
/// For tangent `U` this is `(X+U)(I_r + UᵀU/N)^{-1/2}`; using the full Gram
/// matrix keeps the output on the manifold for any `U` and stops roundoff
/// from accumulating along a trajectory.
pub fn polar_retract(x: &StiefelPoint, u: &DMatrix<f64>) -> Result<StiefelPoint> {
    if u.shape() != x.matrix().shape() {
        return Err(Error::shape(
            format!("{}×{}", x.n(), x.r()),
            format!("{}×{}", u.nrows(), u.ncols()),
        ));
    }
    if u.iter().all(|&c| c == 0.0) {
        return Ok(x.clone());
    }
    let y = x.matrix() + u;
    let n = x.n() as f64;
    let gram = (y.transpose() * &y) / n;
    let b = symmetric_inverse_sqrt(&gram).map_err(|e| {
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        let cond = eig.max() / eig.min().abs().max(f64::MIN_POSITIVE);
        Error::Retraction(format!("{e}; condition number of (X+U)ᵀ(X+U)/N ≈ {cond:e}"))
    })?;
    Ok(StiefelPoint::new_unchecked(y * b))
}
