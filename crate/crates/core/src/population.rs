//! The noiseless `r × r` correlation system and sequential-elimination
//! detection.
//!
//! With the noise generator switched off and `√M` absorbed into the clock,
//! the correlations evolve by
//!
//! ```text
//! dm_ij/dt = p λ_iλ_j m_ij^{p−1}
//!          − (p/2) Σ_{kℓ} λ_k m_kj m_kℓ m_iℓ (λ_j m_kj^{p−2} + λ_ℓ m_kℓ^{p−2}).
//! ```

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::dynamics::{Termination, Trajectory};
use crate::error::{Error, Result};
use crate::model::{max_singular_value, CorrelationMatrix, TOL_CORR};
use crate::theory::GreedySelection;

/// Default mate-suppression level for the `N`-free population system.
pub const DEFAULT_EPS_PRIME: f64 = 0.05;

/// Scratch buffers for [`rhs_into`], sized for one `r`.
#[derive(Debug, Clone)]
pub struct RhsScratch {
    r: usize,
    pow: Vec<f64>,
    gram: Vec<f64>,
    cross: Vec<f64>,
}

impl RhsScratch {
    pub fn new(r: usize) -> Self {
        Self {
            r,
            pow: vec![0.0; r * r],
            gram: vec![0.0; r * r],
            cross: vec![0.0; r * r],
        }
    }
}

/// Column-major flat form of the right-hand side; `out` is overwritten.
///
/// Uses `Q = m mᵀ` and `P = B mᵀ` with `B_kℓ = λ_ℓ m_kℓ^{p−1}`, so the
/// double sum costs `O(r³)`.
pub fn rhs_into(m: &[f64], lambdas: &[f64], p: usize, scratch: &mut RhsScratch, out: &mut [f64]) {
    let r = scratch.r;
    assert!(m.len() == r * r && out.len() == r * r && lambdas.len() == r);
    match r {
        1 => return rhs_fixed::<1>(m, lambdas, p, out),
        2 => return rhs_fixed::<2>(m, lambdas, p, out),
        3 => return rhs_fixed::<3>(m, lambdas, p, out),
        4 => return rhs_fixed::<4>(m, lambdas, p, out),
        _ => {}
    }
    let pf = p as f64;
    let RhsScratch { pow, gram, cross, .. } = scratch;
    match p {
        3 => pow.iter_mut().zip(m).for_each(|(w, &x)| *w = x * x),
        4 => pow.iter_mut().zip(m).for_each(|(w, &x)| *w = x * x * x),
        _ => pow.iter_mut().zip(m).for_each(|(w, &x)| *w = x.powi(p as i32 - 1)),
    }
    // Q_ik = Σ_ℓ m_iℓ m_kℓ ; P_ki = Σ_ℓ λ_ℓ m_kℓ^{p−1} m_iℓ, one column ℓ at a time
    gram.fill(0.0);
    cross.fill(0.0);
    for ((col, pcol), &lam) in m.chunks_exact(r).zip(pow.chunks_exact(r)).zip(lambdas) {
        for ((gcol, ccol), &mk) in gram.chunks_exact_mut(r).zip(cross.chunks_exact_mut(r)).zip(col) {
            for ((g, c), (&mi, &pi)) in gcol.iter_mut().zip(ccol.iter_mut()).zip(col.iter().zip(pcol)) {
                *g += mi * mk;
                *c += lam * pi * mk;
            }
        }
    }
    // cross is now stored with cross[k + i·r] = P_ki
    for (j, ((ocol, mcol), pcol)) in out.chunks_exact_mut(r).zip(m.chunks_exact(r)).zip(pow.chunks_exact(r)).enumerate() {
        let lj = lambdas[j];
        for (i, o) in ocol.iter_mut().enumerate() {
            let mut first = 0.0;
            let mut second = 0.0;
            let qrow = &gram[i * r..(i + 1) * r];
            let prow = &cross[i * r..(i + 1) * r];
            for k in 0..r {
                first += qrow[k] * lambdas[k] * pcol[k];
                second += lambdas[k] * mcol[k] * prow[k];
            }
            *o = pf * lambdas[i] * lj * pcol[i] - 0.5 * pf * (lj * first + second);
        }
    }
}

/// Same computation with the size known at compile time, for small `r`.
fn rhs_fixed<const R: usize>(m: &[f64], lambdas: &[f64], p: usize, out: &mut [f64]) {
    let pf = p as f64;
    let at = |i: usize, j: usize| i + j * R;
    let mut pow = [[0.0; R]; R];
    for j in 0..R {
        for i in 0..R {
            let x = m[at(i, j)];
            pow[j][i] = match p {
                3 => x * x,
                4 => x * x * x,
                _ => x.powi(p as i32 - 1),
            };
        }
    }
    let mut gram = [[0.0; R]; R];
    let mut cross = [[0.0; R]; R];
    for i in 0..R {
        for k in 0..R {
            let (mut q, mut c) = (0.0, 0.0);
            for l in 0..R {
                q += m[at(i, l)] * m[at(k, l)];
                c += lambdas[l] * pow[l][k] * m[at(i, l)];
            }
            gram[i][k] = q;
            cross[i][k] = c;
        }
    }
    for j in 0..R {
        for i in 0..R {
            let (mut first, mut second) = (0.0, 0.0);
            for k in 0..R {
                first += gram[i][k] * lambdas[k] * pow[j][k];
                second += lambdas[k] * m[at(k, j)] * cross[i][k];
            }
            out[at(i, j)] = pf * lambdas[i] * lambdas[j] * pow[j][i] - 0.5 * pf * (lambdas[j] * first + second);
        }
    }
}

/// Right-hand side of the population system at `m` (clock with `√M = 1`).
pub fn population_rhs(m: &DMatrix<f64>, lambdas: &[f64], p: usize) -> DMatrix<f64> {
    let r = m.nrows();
    assert!(m.is_square() && lambdas.len() == r, "m must be r×r with r SNRs");
    let mut out = DMatrix::zeros(r, r);
    let mut scratch = RhsScratch::new(r);
    rhs_into(m.as_slice(), lambdas, p, &mut scratch, out.as_mut_slice());
    out
}

/// Settings for [`integrate_population`].
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationConfig {
    pub t_max: f64,
    pub sample_dt: f64,
    /// Stop once every column has a distinct row with `|m| ≥ 1 − stop_eps`.
    pub stop_eps: Option<f64>,
    pub tol_corr: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            t_max: 1000.0,
            sample_dt: 0.01,
            stop_eps: Some(0.1),
            tol_corr: TOL_CORR,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::InvalidParameter(format!("t_max = {} must be positive", self.t_max)));
        }
        if !(self.sample_dt > 0.0 && self.sample_dt.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sample_dt = {} must be positive",
                self.sample_dt
            )));
        }
        if let Some(e) = self.stop_eps {
            if !(0.0..1.0).contains(&e) {
                return Err(Error::InvalidParameter(format!("stop_eps = {e} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Magnitude below which a correlation is set to zero during integration.
const FLUSH_BELOW: f64 = 1e-100;

/// Base RK4 step `1e−3 / max λ_iλ_j`, halved while any `|m| > 0.99`.
pub fn base_step(lambdas: &[f64]) -> f64 {
    let top = lambdas.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    if top == 0.0 {
        1e-3
    } else {
        1e-3 / (top * top)
    }
}

/// Whether each column has its own row with `|m| ≥ level`.
pub(crate) fn all_columns_matched(m: &[f64], r: usize, level: f64) -> bool {
    if m.iter().filter(|x| x.abs() >= level).count() < r {
        return false;
    }
    let mut used = vec![false; r];
    for j in 0..r {
        let hit = (0..r).find(|&i| !used[i] && m[i + j * r].abs() >= level);
        match hit {
            Some(i) => used[i] = true,
            None => return false,
        }
    }
    true
}

/// Checks `σ_max(m) ≤ limit` by attempting a Cholesky factorization of
/// `limit²·I − mᵀm`; the exact value is computed only when that fails.
fn sigma_max_exceeds(m: &[f64], r: usize, limit: f64, chol: &mut [f64]) -> Option<f64> {
    let l2 = limit * limit;
    for a in 0..r {
        for b in 0..=a {
            let g: f64 = (0..r).map(|k| m[k + a * r] * m[k + b * r]).sum();
            let mut v = if a == b { l2 - g } else { -g };
            for k in 0..b {
                v -= chol[a * r + k] * chol[b * r + k];
            }
            if a == b {
                if v <= 0.0 {
                    let s = max_singular_value(&DMatrix::from_column_slice(r, r, m));
                    return (s > limit).then_some(s);
                }
                chol[a * r + a] = v.sqrt();
            } else {
                chol[a * r + b] = v / chol[b * r + b];
            }
        }
    }
    None
}

/// Classical RK4 on the population system from `m0`.
///
/// Samples are taken at the first step boundary at or past each multiple of
/// `sample_dt`, plus the initial and final states.
pub fn integrate_population(
    m0: &CorrelationMatrix,
    lambdas: &[f64],
    p: usize,
    cfg: &PopulationConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let r = m0.r();
    if lambdas.len() != r {
        return Err(Error::shape(format!("{r} SNRs"), format!("{}", lambdas.len())));
    }
    let h_base = base_step(lambdas);
    let limit = 1.0 + 10.0 * cfg.tol_corr;
    let n = r * r;
    let mut m = m0.matrix().as_slice().to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut scratch = RhsScratch::new(r);
    let mut chol = vec![0.0; n];

    let snapshot = |m: &[f64]| CorrelationMatrix::new_unchecked(DMatrix::from_column_slice(r, r, m));
    let mut traj = Trajectory::new(0.0, snapshot(&m), None);
    let mut t = 0.0;
    let mut next_sample = cfg.sample_dt;
    let mut steps = 0usize;
    let stop_level = cfg.stop_eps.map(|e| 1.0 - e);

    let termination = loop {
        if let Some(level) = stop_level {
            if all_columns_matched(&m, r, level) {
                break Termination::Recovered;
            }
        }
        if t >= cfg.t_max {
            break Termination::Horizon;
        }
        let near_one = m.iter().any(|x| x.abs() > 0.99);
        let mut h = if near_one { 0.5 * h_base } else { h_base };
        if t + h > cfg.t_max {
            h = cfg.t_max - t;
        }

        rhs_into(&m, lambdas, p, &mut scratch, &mut k1);
        for ((d, &x), &k) in tmp.iter_mut().zip(&m).zip(&k1) {
            *d = x + 0.5 * h * k;
        }
        rhs_into(&tmp, lambdas, p, &mut scratch, &mut k2);
        for ((d, &x), &k) in tmp.iter_mut().zip(&m).zip(&k2) {
            *d = x + 0.5 * h * k;
        }
        rhs_into(&tmp, lambdas, p, &mut scratch, &mut k3);
        for ((d, &x), &k) in tmp.iter_mut().zip(&m).zip(&k3) {
            *d = x + h * k;
        }
        rhs_into(&tmp, lambdas, p, &mut scratch, &mut k4);
        for idx in 0..n {
            m[idx] += h / 6.0 * (k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx]);
            // suppressed entries decay exponentially; keep them out of the
            // subnormal range, where arithmetic is orders of magnitude slower
            if m[idx].abs() < FLUSH_BELOW {
                m[idx] = 0.0;
            }
        }
        t += h;
        steps += 1;

        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::Integration {
                t,
                reason: "non-finite correlation".into(),
            });
        }
        if let Some(s) = sigma_max_exceeds(&m, r, limit, &mut chol) {
            return Err(Error::ReductionBreakdown { t, sigma_max: s });
        }
        if t >= next_sample - 1e-12 * next_sample {
            traj.push(t, snapshot(&m), None);
            while next_sample <= t + 1e-12 * next_sample {
                next_sample += cfg.sample_dt;
            }
        }
    };
    if traj.times.last() != Some(&t) {
        traj.push(t, snapshot(&m), None);
    }
    traj.termination = termination;
    traj.steps = steps;
    Ok(traj)
}

/// A sustained crossing `|m_ij| ≥ 1 − ε` from time `t` on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub i: usize,
    pub j: usize,
    pub t: f64,
}

/// Outcome of [`detect_elimination`]. Indices are 0-based; the JSON form is
/// 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct EliminationReport {
    pub ordering: Vec<Crossing>,
    /// For each ordered pair, max of `|m|` over its row and column mates on
    /// `[T_k, end]`.
    pub suppressed: BTreeMap<(usize, usize), f64>,
    /// Pairs that crossed and later fell back below `1 − ε` for good;
    /// `t` is the first crossing.
    pub transients: Vec<Crossing>,
    pub matched_prediction: Option<bool>,
    /// All suppressed values are `≤ ε′`.
    pub mates_suppressed: bool,
}

impl EliminationReport {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.ordering.iter().map(|c| (c.i, c.j)).collect()
    }

    /// Ordered pairs as a map column → row, if every column is covered.
    pub fn permutation(&self, r: usize) -> Option<Vec<usize>> {
        if self.ordering.len() != r {
            return None;
        }
        let mut perm = vec![usize::MAX; r];
        for c in &self.ordering {
            perm[c.j] = c.i;
        }
        Some(perm)
    }

    pub fn to_json(&self) -> Value {
        let pair = |c: &Crossing| json!({"i": c.i + 1, "j": c.j + 1, "T": c.t});
        let suppressed: serde_json::Map<String, Value> = self
            .suppressed
            .iter()
            .map(|(&(i, j), &v)| (format!("{}_{}", i + 1, j + 1), json!(v)))
            .collect();
        json!({
            "ordering": self.ordering.iter().map(pair).collect::<Vec<_>>(),
            "suppressed": suppressed,
            "matched_prediction": self.matched_prediction,
            "mates_suppressed": self.mates_suppressed,
            "transients": self.transients.iter().map(pair).collect::<Vec<_>>(),
        })
    }
}

/// Reads off the sequential-elimination ordering of a recorded trajectory.
pub fn detect_elimination(
    traj: &Trajectory,
    eps: f64,
    eps_prime: f64,
    prediction: Option<&GreedySelection>,
) -> EliminationReport {
    let level = 1.0 - eps;
    let r = traj.snapshots.first().map_or(0, |m| m.r());
    let len = traj.times.len();

    let mut sustained = Vec::new();
    let mut transients = Vec::new();
    for i in 0..r {
        for j in 0..r {
            let above = |s: usize| traj.snapshots[s].get(i, j).abs() >= level;
            let Some(first) = (0..len).find(|&s| above(s)) else {
                continue;
            };
            match (0..len).rev().find(|&s| !above(s)) {
                None => sustained.push(Crossing { i, j, t: traj.times[0] }),
                Some(last_below) if last_below + 1 < len => sustained.push(Crossing {
                    i,
                    j,
                    t: traj.times[last_below + 1],
                }),
                Some(_) => transients.push(Crossing {
                    i,
                    j,
                    t: traj.times[first],
                }),
            }
        }
    }
    sustained.sort_by(|a, b| a.t.total_cmp(&b.t).then((a.i, a.j).cmp(&(b.i, b.j))));

    let mut rows = vec![false; r];
    let mut cols = vec![false; r];
    let mut ordering = Vec::new();
    for c in sustained {
        if !rows[c.i] && !cols[c.j] {
            rows[c.i] = true;
            cols[c.j] = true;
            ordering.push(c);
        }
    }

    let mut suppressed = BTreeMap::new();
    for c in &ordering {
        let start = traj.times.partition_point(|&t| t < c.t);
        let mut worst: f64 = 0.0;
        for m in &traj.snapshots[start..] {
            for l in 0..r {
                if l != c.j {
                    worst = worst.max(m.get(c.i, l).abs());
                }
                if l != c.i {
                    worst = worst.max(m.get(l, c.j).abs());
                }
            }
        }
        suppressed.insert((c.i, c.j), worst);
    }
    let mates_suppressed = suppressed.values().all(|&v| v <= eps_prime);
    let matched_prediction = prediction.map(|sel| {
        sel.pairs.len() == ordering.len() && sel.pairs.iter().zip(&ordering).all(|(&(i, j), c)| c.i == i && c.j == j)
    });
    EliminationReport {
        ordering,
        suppressed,
        transients,
        matched_prediction,
        mates_suppressed,
    }
}
