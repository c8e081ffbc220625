//! The spiked tensor instance: noise tensor, Hamiltonians, correlations and
//! gradients of the rescaled Hamiltonian
//!
//! ```text
//! H(X) = H₀(X) − √M · N · Σ_{ij} λ_i λ_j m_ij^p,
//! H₀(X) = N^{−(p−1)/2} Σ_i λ_i ⟨W, x_i^{⊗p}⟩,      m_ij = ⟨v_i, x_j⟩ / N.
//! ```
//!
//! The `M` i.i.d. observations are represented by a single standard Gaussian
//! tensor `W`; their average is `W/√M` in law, and the rescaling by `√M`
//! moves that factor onto the signal term.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{self, StiefelPoint, TangentVector};
use crate::population::population_rhs;
use crate::seed;

/// Default ceiling on noise-tensor entries (~400 MB of `f64`).
pub const DEFAULT_MEMORY_BUDGET: u64 = 50_000_000;

/// Slack on the `σ_max(m) ≤ 1` invariant of correlation matrices.
pub const TOL_CORR: f64 = 1e-6;

/// Everything needed to build a [`SpikedModel`] besides randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub p: usize,
    pub r: usize,
    pub n: usize,
    pub lambdas: Vec<f64>,
    pub sqrt_m: f64,
    #[serde(default = "default_budget")]
    pub memory_budget: u64,
}

fn default_budget() -> u64 {
    DEFAULT_MEMORY_BUDGET
}

impl ModelParams {
    pub fn new(p: usize, n: usize, lambdas: Vec<f64>, sqrt_m: f64) -> Self {
        Self {
            p,
            r: lambdas.len(),
            n,
            lambdas,
            sqrt_m,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }

    /// Checks everything except the memory budget.
    pub fn validate_shape(&self) -> Result<()> {
        if self.p < 3 {
            return Err(Error::InvalidParameter(format!(
                "tensor order p = {} must be at least 3",
                self.p
            )));
        }
        if self.r == 0 || self.r > self.n {
            return Err(Error::InvalidParameter(format!(
                "need 1 ≤ r ≤ N, got r = {}, N = {}",
                self.r, self.n
            )));
        }
        if self.lambdas.len() != self.r {
            return Err(Error::InvalidParameter(format!(
                "{} SNRs given for r = {}",
                self.lambdas.len(),
                self.r
            )));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidParameter(
                "SNRs must be finite and non-negative".into(),
            ));
        }
        if self.lambdas.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidParameter(
                "SNRs must be sorted non-increasing".into(),
            ));
        }
        if !(self.sqrt_m.is_finite() && self.sqrt_m >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "signal multiplier √M = {} must be finite and non-negative",
                self.sqrt_m
            )));
        }
        Ok(())
    }

    /// Number of noise entries `N^p`, if it fits in the budget.
    pub fn tensor_len(&self) -> Result<usize> {
        let entries = (self.n as u128)
            .checked_pow(self.p as u32)
            .unwrap_or(u128::MAX);
        if entries > self.memory_budget as u128 {
            return Err(Error::Budget {
                entries,
                budget: self.memory_budget,
            });
        }
        Ok(entries as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        self.tensor_len().map(|_| ())
    }

    /// `M = (√M)²`, reported alongside `sqrt_m` in outputs.
    pub fn m(&self) -> f64 {
        self.sqrt_m * self.sqrt_m
    }
}

/// Dense order-`p` tensor on `ℝ^N`, row-major over `(i₁, …, i_p)`.
///
/// `entries == None` encodes the zero tensor without allocating it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTensor {
    p: usize,
    n: usize,
    entries: Option<Vec<f64>>,
}

impl NoiseTensor {
    pub fn zeros(p: usize, n: usize) -> Self {
        Self {
            p,
            n,
            entries: None,
        }
    }

    pub fn generate<R: Rng + ?Sized>(p: usize, n: usize, rng: &mut R) -> Self {
        let len = n.pow(p as u32);
        let entries = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            p,
            n,
            entries: Some(entries),
        }
    }

    pub fn from_entries(p: usize, n: usize, entries: Vec<f64>) -> Result<Self> {
        let len = n.pow(p as u32);
        if entries.len() != len {
            return Err(Error::shape(
                format!("{len} entries (N^p)"),
                format!("{}", entries.len()),
            ));
        }
        Ok(Self {
            p,
            n,
            entries: Some(entries),
        })
    }

    pub fn order(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_none()
    }

    pub fn entries(&self) -> Option<&[f64]> {
        self.entries.as_deref()
    }

    /// For each column `x` of `x_cols`: `⟨W, x^{⊗p}⟩` and its Euclidean
    /// gradient `Σ_{s=1}^p W(x, …, ·_s, …, x)` (slots summed, `W` not
    /// symmetrized).
    ///
    /// The flat tensor is read as `N^{p−1}` contiguous fibres along the last
    /// slot. One streaming pass contracts each fibre with `x` (giving the
    /// partial contraction `T`) and accumulates it into the last-slot gradient
    /// weighted by the prefix products; the leading slots then come from `T`.
    /// With `parallel` set and more than one rayon thread, the fibres are split
    /// into chunks whose partial gradients are added in chunk order.
    pub fn forms_and_gradients(&self, x_cols: &DMatrix<f64>, parallel: bool) -> (Vec<f64>, DMatrix<f64>) {
        let n = self.n;
        let r = x_cols.ncols();
        assert_eq!(x_cols.nrows(), n, "column length must equal N");
        let Some(w) = self.entries.as_deref() else {
            return (vec![0.0; r], DMatrix::zeros(n, r));
        };
        let q_len = n.pow(self.p as u32 - 1);
        let k = prefix_products(x_cols, self.p - 1);
        let x = x_cols.as_slice();
        let mut t = vec![0.0; q_len * r];
        let mut grad = DMatrix::zeros(n, r);

        let threads = rayon::current_num_threads();
        if parallel && threads > 1 && q_len >= 2 * threads {
            let chunk = q_len.div_ceil(threads);
            let parts: Vec<Vec<f64>> = w
                .par_chunks(chunk * n)
                .zip(k.par_chunks(chunk * r))
                .zip(t.par_chunks_mut(chunk * r))
                .map(|((wc, kc), tc)| {
                    let mut g = vec![0.0; n * r];
                    fibre_pass(wc, n, x, r, kc, tc, &mut g);
                    g
                })
                .collect();
            for g in parts {
                for (a, b) in grad.as_mut_slice().iter_mut().zip(&g) {
                    *a += b;
                }
            }
        } else {
            fibre_pass(w, n, x, r, &k, &mut t, grad.as_mut_slice());
        }

        let values = (0..r)
            .map(|j| (0..q_len).map(|q| k[q * r + j] * t[q * r + j]).sum())
            .collect();
        leading_slot_gradients(&t, x_cols, self.p - 1, &mut grad);
        (values, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (u, v) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..4 {
            acc[l] += u[l] * v[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(u, v)| u * v).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `t[q, j] = ⟨fibre_q, x_j⟩` and `g_j += Σ_q k[q, j]·fibre_q` over the fibres
/// in `w`. `k` and `t` are row-major `q × r`; `x` and `g` column-major `N × r`.
fn fibre_pass(w: &[f64], n: usize, x: &[f64], r: usize, k: &[f64], t: &mut [f64], g: &mut [f64]) {
    for ((fibre, kq), tq) in w.chunks_exact(n).zip(k.chunks_exact(r)).zip(t.chunks_exact_mut(r)) {
        for j in 0..r {
            tq[j] = dot(fibre, &x[j * n..(j + 1) * n]);
            let c = kq[j];
            for (ga, &wa) in g[j * n..(j + 1) * n].iter_mut().zip(fibre) {
                *ga += c * wa;
            }
        }
    }
}

/// Row-major `K[q, j] = Π_l x_j[i_l]` over the row-major prefix
/// `q = (i₁, …, i_d)`.
fn prefix_products(x_cols: &DMatrix<f64>, depth: usize) -> Vec<f64> {
    let n = x_cols.nrows();
    let r = x_cols.ncols();
    let q_len = n.pow(depth as u32);
    let mut k = vec![0.0; q_len * r];
    let mut cur = Vec::with_capacity(q_len);
    let mut next = Vec::with_capacity(q_len);
    for j in 0..r {
        let x = x_cols.column(j);
        cur.clear();
        cur.push(1.0);
        for _ in 0..depth {
            next.clear();
            for &c in &cur {
                next.extend(x.iter().map(|&xa| c * xa));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        for (q, &v) in cur.iter().enumerate() {
            k[q * r + j] = v;
        }
    }
    k
}

/// Adds `Σ_q T[q,j] Π_{l≠k} x_j[i_l]` at index `i_k` for every leading slot
/// `k < depth`. `t` is row-major `q × r`.
fn leading_slot_gradients(t: &[f64], x_cols: &DMatrix<f64>, depth: usize, grad: &mut DMatrix<f64>) {
    let n = x_cols.nrows();
    let r = x_cols.ncols();
    let mut idx = vec![0usize; depth];
    let mut prefix = vec![1.0; depth + 1];
    let mut suffix = vec![1.0; depth + 1];
    for j in 0..r {
        let x = x_cols.column(j);
        idx.iter_mut().for_each(|i| *i = 0);
        for tq in t.chunks_exact(r).map(|row| row[j]) {
            for l in 0..depth {
                prefix[l + 1] = prefix[l] * x[idx[l]];
            }
            for l in (0..depth).rev() {
                suffix[l] = suffix[l + 1] * x[idx[l]];
            }
            for l in 0..depth {
                grad[(idx[l], j)] += tq * prefix[l] * suffix[l + 1];
            }
            // odometer, last index fastest
            for l in (0..depth).rev() {
                idx[l] += 1;
                if idx[l] < n {
                    break;
                }
                idx[l] = 0;
            }
        }
    }
}

/// `m = VᵀX / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix(DMatrix<f64>);

impl CorrelationMatrix {
    /// Checks squareness and `σ_max ≤ 1 + TOL_CORR`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::shape(
                "non-empty square matrix",
                format!("{}×{}", m.nrows(), m.ncols()),
            ));
        }
        let c = Self(m);
        let s = c.max_singular_value();
        if !(s <= 1.0 + TOL_CORR) {
            return Err(Error::InvalidParameter(format!(
                "correlation matrix has singular value {s} > 1"
            )));
        }
        Ok(c)
    }

    pub(crate) fn new_unchecked(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn r(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn max_singular_value(&self) -> f64 {
        max_singular_value(&self.0)
    }
}

pub(crate) fn max_singular_value(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    nalgebra::SymmetricEigen::new(g).eigenvalues.max().max(0.0).sqrt()
}

/// One spiked tensor instance. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SpikedModel {
    params: ModelParams,
    spikes: StiefelPoint,
    noise: NoiseTensor,
    seed: Option<u64>,
}

impl SpikedModel {
    /// Draws `V ~ μ_{N×r}` and then `W` i.i.d. `N(0,1)` from `rng`.
    pub fn generate<R: Rng + ?Sized>(params: ModelParams, rng: &mut R) -> Result<Self> {
        params.validate()?;
        let spikes = manifold::sample_uniform(params.n, params.r, rng)?;
        let noise = NoiseTensor::generate(params.p, params.n, rng);
        Ok(Self {
            params,
            spikes,
            noise,
            seed: None,
        })
    }

    /// [`SpikedModel::generate`] from a dedicated ChaCha stream, remembering
    /// the seed so the instance can be regenerated from its header.
    pub fn from_seed(params: ModelParams, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let mut model = Self::generate(params, &mut rng)?;
        model.seed = Some(seed);
        Ok(model)
    }

    /// Explicit spikes and noise. Noise shape must match `(p, N)`.
    pub fn from_parts(params: ModelParams, spikes: StiefelPoint, noise: NoiseTensor) -> Result<Self> {
        params.validate_shape()?;
        if spikes.n() != params.n || spikes.r() != params.r {
            return Err(Error::shape(
                format!("{}×{} spikes", params.n, params.r),
                format!("{}×{}", spikes.n(), spikes.r()),
            ));
        }
        if noise.order() != params.p || noise.dim() != params.n {
            return Err(Error::shape(
                format!("order-{} tensor on ℝ^{}", params.p, params.n),
                format!("order-{} tensor on ℝ^{}", noise.order(), noise.dim()),
            ));
        }
        if !noise.is_zero() {
            params.tensor_len()?;
        }
        Ok(Self {
            params,
            spikes,
            noise,
            seed: None,
        })
    }

    /// Noiseless instance with spikes drawn from `rng`.
    pub fn noiseless<R: Rng + ?Sized>(params: ModelParams, rng: &mut R) -> Result<Self> {
        params.validate_shape()?;
        let spikes = manifold::sample_uniform(params.n, params.r, rng)?;
        let noise = NoiseTensor::zeros(params.p, params.n);
        Self::from_parts(params, spikes, noise)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn p(&self) -> usize {
        self.params.p
    }

    pub fn r(&self) -> usize {
        self.params.r
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.params.lambdas
    }

    pub fn sqrt_m(&self) -> f64 {
        self.params.sqrt_m
    }

    pub fn spikes(&self) -> &StiefelPoint {
        &self.spikes
    }

    pub fn noise(&self) -> &NoiseTensor {
        &self.noise
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    fn check_point(&self, x: &StiefelPoint) -> Result<()> {
        if x.n() != self.n() || x.r() != self.r() {
            return Err(Error::shape(
                format!("{}×{}", self.n(), self.r()),
                format!("{}×{}", x.n(), x.r()),
            ));
        }
        Ok(())
    }

    fn noise_scale(&self) -> f64 {
        (self.n() as f64).powf(-((self.p() - 1) as f64) / 2.0)
    }

    /// `m_ij = ⟨v_i, x_j⟩ / N`.
    pub fn correlations(&self, x: &StiefelPoint) -> Result<CorrelationMatrix> {
        self.check_point(x)?;
        Ok(CorrelationMatrix::new_unchecked(self.correlation_matrix(x)))
    }

    fn correlation_matrix(&self, x: &StiefelPoint) -> DMatrix<f64> {
        self.spikes.matrix().tr_mul(x.matrix()) / self.n() as f64
    }

    /// `H₀(X) = N^{−(p−1)/2} Σ_i λ_i ⟨W, x_i^{⊗p}⟩`.
    pub fn h0_value(&self, x: &StiefelPoint) -> Result<f64> {
        self.check_point(x)?;
        let (values, _) = self.noise.forms_and_gradients(x.matrix(), false);
        Ok(self.noise_scale() * values.iter().zip(self.lambdas()).map(|(v, l)| l * v).sum::<f64>())
    }

    /// `H(X) = H₀(X) − √M·N·Σ λ_iλ_j m_ij^p`.
    pub fn hamiltonian(&self, x: &StiefelPoint) -> Result<f64> {
        let h0 = self.h0_value(x)?;
        let m = self.correlation_matrix(x);
        let p = self.p() as i32;
        let lam = self.lambdas();
        let mut signal = 0.0;
        for i in 0..self.r() {
            for j in 0..self.r() {
                signal += lam[i] * lam[j] * m[(i, j)].powi(p);
            }
        }
        Ok(h0 - self.sqrt_m() * self.n() as f64 * signal)
    }

    /// Euclidean gradient of `H₀`: column `j` is
    /// `λ_j N^{−(p−1)/2} Σ_s W(x_j, …, ·_s, …, x_j)`.
    pub fn noise_euclidean_gradient(&self, x: &StiefelPoint, parallel: bool) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let (_, mut g) = self.noise.forms_and_gradients(x.matrix(), parallel);
        let scale = self.noise_scale();
        for (j, lam) in self.lambdas().iter().enumerate() {
            g.column_mut(j).scale_mut(lam * scale);
        }
        Ok(g)
    }

    /// Euclidean gradient of `H`; column `j` is
    /// `∂H₀/∂x_j − √M·p·Σ_i λ_iλ_j m_ij^{p−1} v_i`.
    pub fn euclidean_risk_gradient(&self, x: &StiefelPoint) -> Result<DMatrix<f64>> {
        self.euclidean_risk_gradient_with(x, false)
    }

    pub fn euclidean_risk_gradient_with(&self, x: &StiefelPoint, parallel: bool) -> Result<DMatrix<f64>> {
        let mut g = self.noise_euclidean_gradient(x, parallel)?;
        let m = self.correlation_matrix(x);
        let p = self.p();
        let lam = self.lambdas();
        let r = self.r();
        let coeff = DMatrix::from_fn(r, r, |i, j| {
            self.sqrt_m() * p as f64 * lam[i] * lam[j] * m[(i, j)].powi(p as i32 - 1)
        });
        g -= self.spikes.matrix() * coeff;
        Ok(g)
    }

    /// Riemannian gradient of `H` at `X`.
    pub fn riemannian_gradient(&self, x: &StiefelPoint, parallel: bool) -> Result<TangentVector> {
        let g = self.euclidean_risk_gradient_with(x, parallel)?;
        manifold::project_tangent(x, &g)
    }

    /// `(H(X), ∇H(X))` sharing one tensor contraction.
    pub fn energy_and_gradient(&self, x: &StiefelPoint, parallel: bool) -> Result<(f64, TangentVector)> {
        self.check_point(x)?;
        let (values, mut g) = self.noise.forms_and_gradients(x.matrix(), parallel);
        let scale = self.noise_scale();
        let lam = self.lambdas();
        let mut h0 = 0.0;
        for j in 0..self.r() {
            h0 += lam[j] * values[j];
            g.column_mut(j).scale_mut(lam[j] * scale);
        }
        let m = self.correlation_matrix(x);
        let p = self.p() as i32;
        let mut signal = 0.0;
        let coeff = DMatrix::from_fn(self.r(), self.r(), |i, j| {
            let lam2 = lam[i] * lam[j];
            signal += lam2 * m[(i, j)].powi(p);
            self.sqrt_m() * p as f64 * lam2 * m[(i, j)].powi(p - 1)
        });
        g -= self.spikes.matrix() * coeff;
        let h = scale * h0 - self.sqrt_m() * self.n() as f64 * signal;
        Ok((h, manifold::project_tangent(x, &g)?))
    }

    /// `L₀m_ij = −⟨(∇H₀)_j, v_i⟩ / N` with `∇` the Riemannian gradient.
    pub fn noise_drift(&self, x: &StiefelPoint) -> Result<DMatrix<f64>> {
        let g = self.noise_euclidean_gradient(x, false)?;
        let rg = manifold::project_tangent(x, &g)?;
        Ok(-(self.spikes.matrix().tr_mul(rg.matrix())) / self.n() as f64)
    }

    /// `Lm_ij` from the explicit generator decomposition:
    /// `L₀m_ij + √M·[p λ_iλ_j m_ij^{p−1} − (p/2) Σ_{kℓ} λ_k m_kj m_kℓ m_iℓ (λ_j m_kj^{p−2} + λ_ℓ m_kℓ^{p−2})]`.
    pub fn generator_m(&self, x: &StiefelPoint) -> Result<DMatrix<f64>> {
        let drift = self.noise_drift(x)?;
        let m = self.correlation_matrix(x);
        let pop = population_rhs(&m, self.lambdas(), self.p());
        Ok(drift + pop * self.sqrt_m())
    }

    /// `Lm = −Vᵀ ∇H(X) / N`, computed through the projected Euclidean
    /// gradient. Must agree with [`SpikedModel::generator_m`].
    pub fn generator_via_projection(&self, x: &StiefelPoint) -> Result<DMatrix<f64>> {
        let rg = self.riemannian_gradient(x, false)?;
        Ok(-(self.spikes.matrix().tr_mul(rg.matrix())) / self.n() as f64)
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            p: self.p(),
            r: self.r(),
            n: self.n(),
            lambdas: self.lambdas().to_vec(),
            sqrt_m: self.sqrt_m(),
            seed: self.seed,
        }
    }

    /// JSON header line, then (optionally) the spike matrix as little-endian
    /// `f64`, column-major. The noise tensor is never written.
    pub fn write_to<W: Write>(&self, mut out: W, include_spikes: bool) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header())?;
        out.write_all(b"\n")?;
        if include_spikes {
            for &v in self.spikes.matrix().as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Inverse of [`SpikedModel::write_to`]: regenerates the instance from the
    /// header seed and, if present, replaces the spikes with the stored ones.
    pub fn read_from<R: Read>(mut input: R, memory_budget: u64) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("model header is not newline-terminated".into()))?;
        let header: ModelHeader = serde_json::from_slice(&bytes[..split])?;
        let body = &bytes[split + 1..];
        let seed = header
            .seed
            .ok_or_else(|| Error::Format("model header has no seed; noise cannot be regenerated".into()))?;
        let params = ModelParams {
            p: header.p,
            r: header.r,
            n: header.n,
            lambdas: header.lambdas,
            sqrt_m: header.sqrt_m,
            memory_budget,
        };
        let mut model = Self::from_seed(params, seed)?;
        let expected = model.n() * model.r() * 8;
        match body.len() {
            0 => {}
            len if len == expected => {
                let vals: Vec<f64> = body
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                let v = DMatrix::from_column_slice(model.n(), model.r(), &vals);
                model.spikes = StiefelPoint::new(v)?;
            }
            len => {
                return Err(Error::Format(format!(
                    "spike block has {len} bytes, expected 0 or {expected}"
                )))
            }
        }
        Ok(model)
    }
}

/// Serialized description of a model; the noise is regenerated from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub p: usize,
    pub r: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub lambdas: Vec<f64>,
    pub sqrt_m: f64,
    pub seed: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Direct multi-index sums for `⟨W, x^{⊗p}⟩` and its slot-summed gradient.
    fn brute_force(w: &[f64], n: usize, p: usize, x: &[f64]) -> (f64, Vec<f64>) {
        let total = n.pow(p as u32);
        let mut value = 0.0;
        let mut grad = vec![0.0; n];
        let mut idx = vec![0usize; p];
        for flat in 0..total {
            let mut rem = flat;
            for s in (0..p).rev() {
                idx[s] = rem % n;
                rem /= n;
            }
            let prod: f64 = idx.iter().map(|&i| x[i]).product();
            value += w[flat] * prod;
            for s in 0..p {
                let others: f64 = idx
                    .iter()
                    .enumerate()
                    .filter(|&(t, _)| t != s)
                    .map(|(_, &i)| x[i])
                    .product();
                grad[idx[s]] += w[flat] * others;
            }
        }
        (value, grad)
    }

    #[test]
    fn contraction_matches_brute_force() {
        let mut rng = seed::rng(21);
        for &(p, n) in &[(3, 5), (4, 4), (5, 3)] {
            let w = NoiseTensor::generate(p, n, &mut rng);
            let x = DMatrix::from_fn(n, 2, |a, j| ((a * 7 + j * 3) as f64 * 0.37).sin());
            let (vals, grads) = w.forms_and_gradients(&x, false);
            for j in 0..2 {
                let col: Vec<f64> = x.column(j).iter().copied().collect();
                let (v, g) = brute_force(w.entries().unwrap(), n, p, &col);
                assert_abs_diff_eq!(vals[j], v, epsilon = 1e-10);
                for a in 0..n {
                    assert_abs_diff_eq!(grads[(a, j)], g[a], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn hand_computed_h0() {
        // p = 3, N = 2, r = 1, λ = 1: H₀ = Σ W_abc x_a x_b x_c / N.
        let w: Vec<f64> = (1..=8).map(|k| k as f64 * 0.5 - 2.0).collect();
        let noise = NoiseTensor::from_entries(3, 2, w.clone()).unwrap();
        let spikes = StiefelPoint::canonical(2, 1).unwrap();
        let params = ModelParams::new(3, 2, vec![1.0], 1.0);
        let model = SpikedModel::from_parts(params, spikes, noise).unwrap();
        let x = StiefelPoint::new(DMatrix::from_column_slice(2, 1, &[1.2, (2.0f64 - 1.44).sqrt()])).unwrap();
        let xs = x.matrix().column(0);
        let mut expected = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    expected += w[a * 4 + b * 2 + c] * xs[a] * xs[b] * xs[c];
                }
            }
        }
        expected /= 2.0;
        assert_abs_diff_eq!(model.h0_value(&x).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn zero_noise_gives_zero_h0_and_drift() {
        let mut rng = seed::rng(2);
        let model = SpikedModel::noiseless(ModelParams::new(3, 20, vec![2.0, 1.0], 5.0), &mut rng).unwrap();
        let x = manifold::sample_uniform(20, 2, &mut rng).unwrap();
        assert_eq!(model.h0_value(&x).unwrap(), 0.0);
        assert_eq!(model.noise_drift(&x).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn correlations_of_spikes_are_identity() {
        let mut rng = seed::rng(4);
        let model = SpikedModel::from_seed(ModelParams::new(3, 12, vec![2.0, 1.0], 1.0), 4).unwrap();
        let m = model.correlations(model.spikes()).unwrap();
        assert_abs_diff_eq!(m.matrix().clone(), DMatrix::identity(2, 2), epsilon = 1e-12);
        // x₁ = −v₂, x₂ = v₁
        let v = model.spikes().matrix();
        let mut x = DMatrix::zeros(12, 2);
        x.set_column(0, &(-v.column(1)));
        x.set_column(1, &v.column(0));
        let m = model.correlations(&StiefelPoint::new(x).unwrap()).unwrap();
        assert_abs_diff_eq!(m.get(1, 0), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(0, 0), 0.0, epsilon = 1e-12);
        let _ = &mut rng;
    }

    #[test]
    fn gradient_at_spikes_without_noise() {
        let mut rng = seed::rng(6);
        let params = ModelParams::new(3, 15, vec![3.0, 2.0], 7.0);
        let model = SpikedModel::noiseless(params, &mut rng).unwrap();
        let g = model.euclidean_risk_gradient(model.spikes()).unwrap();
        let v = model.spikes().matrix();
        for (j, lam) in [3.0, 2.0].iter().enumerate() {
            let expected = v.column(j) * (-7.0 * 3.0 * lam * lam);
            assert_abs_diff_eq!(g.column(j).into_owned(), expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_snr_gives_zero_gradient() {
        let params = ModelParams::new(3, 10, vec![0.0], 3.0);
        let model = SpikedModel::from_seed(params, 1).unwrap();
        let mut rng = seed::rng(8);
        let x = manifold::sample_uniform(10, 1, &mut rng).unwrap();
        assert_eq!(model.euclidean_risk_gradient(&x).unwrap().norm(), 0.0);
        assert_eq!(model.hamiltonian(&x).unwrap(), 0.0);
    }

    #[test]
    fn generator_scalar_example() {
        // W = 0, r = 1, m = 0.5, λ = 2, p = 3, √M = 1 → 2.25
        let mut rng = seed::rng(10);
        let model = SpikedModel::noiseless(ModelParams::new(3, 30, vec![2.0], 1.0), &mut rng).unwrap();
        let m0 = DMatrix::from_element(1, 1, 0.5);
        let x = manifold::point_with_correlations(model.spikes(), &m0, &mut rng).unwrap();
        let l = model.generator_m(&x).unwrap();
        assert_abs_diff_eq!(l[(0, 0)], 2.25, epsilon = 1e-12);
        let l2 = model.generator_via_projection(&x).unwrap();
        assert_abs_diff_eq!(l2[(0, 0)], 2.25, epsilon = 1e-10);
    }

    #[test]
    fn generator_vanishes_at_spikes() {
        let mut rng = seed::rng(12);
        let model = SpikedModel::noiseless(ModelParams::new(4, 30, vec![3.0, 2.0, 1.0], 2.0), &mut rng).unwrap();
        let l = model.generator_m(model.spikes()).unwrap();
        assert!(l.norm() < 1e-12);
    }

    #[test]
    fn generator_routes_agree() {
        let params = ModelParams::new(3, 30, vec![3.0, 2.0, 1.0], 4.0);
        let model = SpikedModel::from_seed(params, 77).unwrap();
        let mut rng = seed::rng(78);
        let x = manifold::sample_uniform(30, 3, &mut rng).unwrap();
        let a = model.generator_m(&x).unwrap();
        let b = model.generator_via_projection(&x).unwrap();
        let rel = (&a - &b).norm() / b.norm();
        assert!(rel < 1e-8, "relative difference {rel}");
    }

    #[test]
    fn budget_enforced() {
        let mut params = ModelParams::new(3, 100, vec![1.0], 1.0);
        params.memory_budget = 999_999;
        assert!(matches!(
            SpikedModel::from_seed(params, 0),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn invalid_lambdas_rejected() {
        assert!(ModelParams::new(3, 10, vec![1.0, 2.0], 1.0).validate().is_err());
        assert!(ModelParams::new(3, 10, vec![1.0, -0.5], 1.0).validate().is_err());
        assert!(ModelParams::new(2, 10, vec![1.0], 1.0).validate().is_err());
    }

    #[test]
    fn header_round_trip_regenerates_noise() {
        let params = ModelParams::new(4, 8, vec![2.0, 1.0], 100.0);
        let model = SpikedModel::from_seed(params, 99).unwrap();
        for include in [false, true] {
            let mut buf = Vec::new();
            model.write_to(&mut buf, include).unwrap();
            let back = SpikedModel::read_from(&buf[..], DEFAULT_MEMORY_BUDGET).unwrap();
            assert_eq!(back.header(), model.header());
            assert_eq!(back.noise(), model.noise());
            assert_eq!(back.spikes(), model.spikes());
        }
        let mut buf = Vec::new();
        model.write_to(&mut buf, true).unwrap();
        buf.pop();
        assert!(SpikedModel::read_from(&buf[..], DEFAULT_MEMORY_BUDGET).is_err());
    }

    #[test]
    fn parallel_contraction_matches_sequential() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let mut rng = seed::rng(31);
        let w = NoiseTensor::generate(3, 17, &mut rng);
        let x = DMatrix::from_fn(17, 2, |a, j| (a as f64 - j as f64 * 0.3).cos());
        let (v1, g1) = w.forms_and_gradients(&x, false);
        let (v2, g2) = pool.install(|| w.forms_and_gradients(&x, true));
        for j in 0..2 {
            assert_abs_diff_eq!(v1[j], v2[j], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(g1, g2, epsilon = 1e-10);
    }
}
