//! Closed-form predictors: initialization matrix, greedy maximum selection,
//! comparison-ODE envelopes, hitting times, sample-complexity regimes and
//! initial-condition predicates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::manifold::StiefelPoint;
use crate::model::{CorrelationMatrix, SpikedModel};

/// Relative tolerance under which two greedy candidates count as tied.
pub const TIE_TOL: f64 = 1e-12;

/// `I₀_ij = λ_iλ_j m_ij^{p−2}`, with negative values zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct InitMatrix {
    pub entries: DMatrix<f64>,
}

pub fn init_matrix(m0: &CorrelationMatrix, lambdas: &[f64], p: usize) -> InitMatrix {
    let m = m0.matrix();
    let r = m.nrows();
    assert_eq!(lambdas.len(), r, "one SNR per spike");
    let entries = DMatrix::from_fn(r, r, |i, j| {
        let w = m[(i, j)].powi(p as i32 - 2);
        if w >= 0.0 {
            lambdas[i] * lambdas[j] * w
        } else {
            0.0
        }
    });
    InitMatrix { entries }
}

/// Ordered `(row, column)` pairs picked by repeated argmax-and-delete.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedySelection {
    pub pairs: Vec<(usize, usize)>,
    /// `|A|` at each selected pair.
    pub values: Vec<f64>,
    /// Smallest relative gap between a selected value and the runner-up at
    /// the same step (`∞` when there was no competitor).
    pub min_relative_gap: f64,
}

impl GreedySelection {
    pub fn r_c(&self) -> usize {
        self.pairs.len()
    }

    /// Column `j` → matched row, when all `r` columns were selected.
    pub fn permutation(&self, r: usize) -> Option<Vec<usize>> {
        if self.pairs.len() != r {
            return None;
        }
        let mut perm = vec![0; r];
        for &(i, j) in &self.pairs {
            perm[j] = i;
        }
        Some(perm)
    }
}

pub fn greedy_selection(a: &InitMatrix) -> Result<GreedySelection> {
    greedy_max_selection(&a.entries, TIE_TOL)
}

/// Greedy maximum selection on `|a|`. Stops when the remaining block is zero.
pub fn greedy_max_selection(a: &DMatrix<f64>, tie_tol: f64) -> Result<GreedySelection> {
    let (rows, cols) = a.shape();
    let mut row_alive = vec![true; rows];
    let mut col_alive = vec![true; cols];
    let mut pairs = Vec::new();
    let mut values = Vec::new();
    let mut min_gap = f64::INFINITY;
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        let mut runner_up = 0.0f64;
        for i in (0..rows).filter(|&i| row_alive[i]) {
            for j in (0..cols).filter(|&j| col_alive[j]) {
                let v = a[(i, j)].abs();
                match best {
                    Some((_, _, b)) if v <= b => runner_up = runner_up.max(v),
                    Some((_, _, b)) => {
                        runner_up = runner_up.max(b);
                        best = Some((i, j, v));
                    }
                    None => best = Some((i, j, v)),
                }
            }
        }
        let Some((i, j, v)) = best else { break };
        if v == 0.0 || !v.is_finite() {
            break;
        }
        if runner_up > 0.0 {
            let gap = (v - runner_up) / v;
            if gap <= tie_tol {
                return Err(Error::AmbiguousSelection {
                    first: v,
                    second: runner_up,
                });
            }
            min_gap = min_gap.min(gap);
        }
        row_alive[i] = false;
        col_alive[j] = false;
        pairs.push((i, j));
        values.push(v);
    }
    Ok(GreedySelection {
        pairs,
        values,
        min_relative_gap: min_gap,
    })
}

/// Parameters of the single-pair comparison ODE `ẏ = (1 ± C₀)√M p λλ y^{p−1}`
/// started at `γ/√N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeParams {
    pub gamma: f64,
    pub lam_prod: f64,
    pub c0: f64,
    pub sqrt_m: f64,
    pub p: usize,
    pub n: usize,
}

impl EnvelopeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("γ = {} must be positive", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.c0) {
            return Err(Error::InvalidParameter(format!("C₀ = {} must lie in [0, 1)", self.c0)));
        }
        if self.p < 3 || self.n == 0 {
            return Err(Error::InvalidParameter("need p ≥ 3 and N ≥ 1".into()));
        }
        if !(self.lam_prod > 0.0 && self.sqrt_m > 0.0) {
            return Err(Error::InvalidParameter("λλ and √M must be positive".into()));
        }
        Ok(())
    }

    pub fn initial(&self) -> f64 {
        self.gamma / (self.n as f64).sqrt()
    }

    /// `√M p(p−2) λλ (γ/√N)^{p−2}` before the `(1 ± C₀)` factor.
    fn base_rate(&self) -> f64 {
        let p = self.p as f64;
        self.sqrt_m * p * (p - 2.0) * self.lam_prod * self.initial().powi(self.p as i32 - 2)
    }

    pub fn blow_up_lower(&self) -> f64 {
        1.0 / ((1.0 - self.c0) * self.base_rate())
    }

    pub fn blow_up_upper(&self) -> f64 {
        1.0 / ((1.0 + self.c0) * self.base_rate())
    }
}

fn envelope(t: f64, par: &EnvelopeParams, factor: f64) -> Result<f64> {
    par.validate()?;
    let rate = factor * par.base_rate();
    let blow_up = 1.0 / rate;
    if t >= blow_up {
        return Err(Error::Domain {
            reason: format!("t = {t} is past the blow-up time {blow_up}"),
            blow_up_time: Some(blow_up),
        });
    }
    Ok(par.initial() * (1.0 - rate * t).powf(-1.0 / (par.p as f64 - 2.0)))
}

/// Lower envelope `ℓ(t)`, driven at rate `(1 − C₀)`.
pub fn envelope_lower(t: f64, par: &EnvelopeParams) -> Result<f64> {
    envelope(t, par, 1.0 - par.c0)
}

/// Upper envelope `u(t)`, driven at rate `(1 + C₀)`.
pub fn envelope_upper(t: f64, par: &EnvelopeParams) -> Result<f64> {
    envelope(t, par, 1.0 + par.c0)
}

/// Times at which the envelopes reach a level; `upper_env ≤ lower_env`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HittingTimes {
    /// `T_u`: the upper envelope hits first.
    pub upper_env: f64,
    /// `T_ℓ`.
    pub lower_env: f64,
}

/// `T = (1 − (γ/γ̃)^{p−2}) / ((1 ∓ C₀) √M p(p−2) λλ (γ/√N)^{p−2})` with
/// `target = γ̃/√N`.
pub fn hitting_time_bounds(par: &EnvelopeParams, target: f64) -> Result<HittingTimes> {
    par.validate()?;
    if !(target > par.initial()) {
        return Err(Error::domain(format!(
            "target {target} must exceed the initial value {}",
            par.initial()
        )));
    }
    let num = 1.0 - (par.initial() / target).powi(par.p as i32 - 2);
    let rate = par.base_rate();
    Ok(HittingTimes {
        upper_env: num / ((1.0 + par.c0) * rate),
        lower_env: num / ((1.0 - par.c0) * rate),
    })
}

/// RK4 for the perturbed single-pair equation
/// `ẏ = (1 + δ(t))·√M p λλ y^{p−1}`, `y(0) = γ/√N`, with `steps` equal steps
/// on `[0, t_end]`. Returns `y(t_end)`.
pub fn single_pair_solve(par: &EnvelopeParams, t_end: f64, steps: usize, delta: impl Fn(f64) -> f64) -> f64 {
    let h = t_end / steps as f64;
    let mut y = par.initial();
    for k in 0..steps {
        y = single_pair_step(par, k as f64 * h, y, h, &delta);
    }
    y
}

fn single_pair_step(par: &EnvelopeParams, t: f64, y: f64, h: f64, delta: &impl Fn(f64) -> f64) -> f64 {
    let c = par.sqrt_m * par.p as f64 * par.lam_prod;
    let e = par.p as i32 - 1;
    let f = |t: f64, y: f64| c * (1.0 + delta(t)) * y.powi(e);
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, y + 0.5 * h * k1);
    let k3 = f(t + 0.5 * h, y + 0.5 * h * k2);
    let k4 = f(t + h, y + h * k3);
    y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// First time the perturbed single-pair solution reaches `target`, by RK4
/// with step `h` and bisection inside the crossing step. `None` if not
/// reached by `t_limit`.
pub fn single_pair_hitting_time(
    par: &EnvelopeParams,
    target: f64,
    h: f64,
    t_limit: f64,
    delta: impl Fn(f64) -> f64,
) -> Option<f64> {
    let mut t = 0.0;
    let mut y = par.initial();
    if y >= target {
        return Some(0.0);
    }
    while t < t_limit {
        let next = single_pair_step(par, t, y, h, &delta);
        if !next.is_finite() || next >= target {
            let (mut lo, mut hi) = (0.0, h);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if single_pair_step(par, t, y, mid, &delta) >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(t + hi);
        }
        y = next;
        t += h;
    }
    None
}

/// Heuristic time for `m_ij` to climb from `γ/√N` to `ε`, in original
/// (unrescaled) time:
/// `(1 − (γ/(ε√N))^{p−2}) / (λλ p(p−2) γ^{p−2}) · N^{(p−2)/2}`.
pub fn predict_hitting_heuristic(gamma: f64, lam_prod: f64, p: usize, eps: f64, n: usize) -> Result<f64> {
    let sn = (n as f64).sqrt();
    if !(gamma > 0.0) || !(eps * sn > gamma) {
        return Err(Error::domain(format!(
            "need 0 < γ < ε√N, got γ = {gamma}, ε√N = {}",
            eps * sn
        )));
    }
    if !(lam_prod > 0.0) {
        return Err(Error::domain("λλ must be positive"));
    }
    let pf = p as f64;
    let k = p as i32 - 2;
    Ok((1.0 - (gamma / (eps * sn)).powi(k)) / (lam_prod * pf * (pf - 2.0) * gamma.powi(k))
        * (n as f64).powf((pf - 2.0) / 2.0))
}

/// Original-time duration on the rescaled clock.
pub fn to_rescaled_time(original: f64, sqrt_m: f64) -> f64 {
    original / sqrt_m
}

/// Macroscopic threshold `ε_N = C·N^{−(p−2)/(2(p−1))}`.
pub fn eps_n(c: f64, n: usize, p: usize) -> f64 {
    let pf = p as f64;
    c * (n as f64).powf(-(pf - 2.0) / (2.0 * (pf - 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FirstSpike,
    AllSpikes,
    SubThreshold,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::FirstSpike => "first_spike",
            Regime::AllSpikes => "all_spikes",
            Regime::SubThreshold => "sub_threshold",
        }
    }
}

/// `α = log M / log N`, so that `M = N^α`.
pub fn sample_exponent(n: usize, m: f64) -> f64 {
    m.ln() / (n as f64).ln()
}

/// Heuristic finite-`N` label from the exponents `p − 2` and `p − 1`.
pub fn regime_classifier(n: usize, p: usize, m: f64) -> Regime {
    let alpha = sample_exponent(n, m);
    let pf = p as f64;
    if alpha > pf - 1.0 {
        Regime::AllSpikes
    } else if alpha > pf - 2.0 {
        Regime::FirstSpike
    } else {
        Regime::SubThreshold
    }
}

/// `γ₂/√N ≤ m_ij < γ₁/√N` for every entry.
pub fn condition1_member(m0: &CorrelationMatrix, n: usize, gamma1: f64, gamma2: f64) -> bool {
    let sn = (n as f64).sqrt();
    m0.matrix().iter().all(|&v| gamma2 / sn <= v && v < gamma1 / sn)
}

/// `|λ_iλ_j m_ij^{p−2} / (λ_kλ_ℓ m_kℓ^{p−2}) − 1| > γ₃/γ₁` for all distinct
/// pairs. A non-finite ratio fails the condition.
pub fn condition2_member(m0: &CorrelationMatrix, lambdas: &[f64], p: usize, gamma1: f64, gamma3: f64) -> bool {
    let m = m0.matrix();
    let r = m.nrows();
    let w: Vec<f64> = (0..r * r)
        .map(|idx| {
            let (i, j) = (idx % r, idx / r);
            lambdas[i] * lambdas[j] * m[(i, j)].powi(p as i32 - 2)
        })
        .collect();
    let bound = gamma3 / gamma1;
    for a in 0..w.len() {
        for b in 0..w.len() {
            if a == b {
                continue;
            }
            let ratio = w[a] / w[b];
            if !ratio.is_finite() || (ratio - 1.0).abs() <= bound {
                return false;
            }
        }
    }
    true
}

/// `|L₀m_ij(X₀)| ≤ γ₀/√N` for every entry.
pub fn condition0_level1_member(model: &SpikedModel, x0: &StiefelPoint, gamma0: f64) -> Result<bool> {
    let drift = model.noise_drift(x0)?;
    let bound = gamma0 / (model.n() as f64).sqrt();
    Ok(drift.iter().all(|v| v.abs() <= bound))
}

/// Everything the theory predicts from an initial correlation matrix.
#[derive(Debug, Clone)]
pub struct PredictionReport {
    pub init: InitMatrix,
    pub selection: GreedySelection,
    pub permutation: Option<Vec<usize>>,
    /// Heuristic `(original, rescaled)` hitting times of level `eps` for each
    /// selected pair; `None` if the pair already starts at or above `eps`.
    pub hitting_times: Vec<Option<(f64, f64)>>,
    pub regime: Regime,
    pub alpha: f64,
}

pub fn predict(m0: &CorrelationMatrix, lambdas: &[f64], p: usize, n: usize, sqrt_m: f64, eps: f64) -> Result<PredictionReport> {
    let init = init_matrix(m0, lambdas, p);
    let selection = greedy_selection(&init)?;
    let r = m0.r();
    let sn = (n as f64).sqrt();
    let hitting_times = selection
        .pairs
        .iter()
        .map(|&(i, j)| {
            let gamma = m0.get(i, j) * sn;
            predict_hitting_heuristic(gamma, lambdas[i] * lambdas[j], p, eps, n)
                .ok()
                .map(|t| (t, to_rescaled_time(t, sqrt_m)))
        })
        .collect();
    let m = sqrt_m * sqrt_m;
    Ok(PredictionReport {
        permutation: selection.permutation(r),
        init,
        selection,
        hitting_times,
        regime: regime_classifier(n, p, m),
        alpha: sample_exponent(n, m),
    })
}

impl PredictionReport {
    /// JSON form with 1-based indices.
    pub fn to_json(&self) -> Value {
        let e = &self.init.entries;
        let rows: Vec<Vec<f64>> = (0..e.nrows()).map(|i| e.row(i).iter().copied().collect()).collect();
        let pairs: Vec<[usize; 2]> = self.selection.pairs.iter().map(|&(i, j)| [i + 1, j + 1]).collect();
        let times: Vec<Value> = self
            .selection
            .pairs
            .iter()
            .zip(&self.hitting_times)
            .map(|(&(i, j), t)| {
                json!({
                    "i": i + 1,
                    "j": j + 1,
                    "T_original": t.map(|t| t.0),
                    "T_rescaled": t.map(|t| t.1),
                })
            })
            .collect();
        json!({
            "I0": rows,
            "selection": pairs,
            "r_c": self.selection.r_c(),
            "predicted_permutation": self.permutation.as_ref().map(|p| p.iter().map(|i| i + 1).collect::<Vec<_>>()),
            "predicted_hitting_times": times,
            "regime": {
                "label": self.regime.as_str(),
                "alpha": self.alpha,
                "heuristic": true,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cm(rows: &[&[f64]]) -> CorrelationMatrix {
        let r = rows.len();
        CorrelationMatrix::new_unchecked(DMatrix::from_fn(r, r, |i, j| rows[i][j]))
    }

    #[test]
    fn init_matrix_zeroes_negative_odd() {
        let m0 = cm(&[&[0.3, -0.2], &[0.1, 0.4]]);
        let i0 = init_matrix(&m0, &[2.0, 1.0], 3);
        let expected = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.2, 0.4]);
        assert!((i0.entries - expected).norm() < 1e-14);
        let even = init_matrix(&m0, &[2.0, 1.0], 4);
        assert!(even.entries.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn greedy_examples() {
        let a = InitMatrix {
            entries: DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 3.0, 2.0]),
        };
        assert_eq!(greedy_selection(&a).unwrap().pairs, vec![(0, 0), (1, 1)]);
        let d = InitMatrix {
            entries: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![5.0, 3.0, 0.0])),
        };
        let s = greedy_selection(&d).unwrap();
        assert_eq!(s.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(s.r_c(), 2);
        let z = InitMatrix {
            entries: DMatrix::zeros(3, 3),
        };
        assert_eq!(greedy_selection(&z).unwrap().r_c(), 0);
    }

    #[test]
    fn greedy_rejects_ties() {
        let a = InitMatrix {
            entries: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.5, 0.2]),
        };
        assert!(matches!(greedy_selection(&a), Err(Error::AmbiguousSelection { .. })));
    }

    #[test]
    fn envelope_blow_up_example() {
        let par = EnvelopeParams {
            gamma: 1.0,
            lam_prod: 1.0,
            c0: 0.0,
            sqrt_m: 1.0,
            p: 3,
            n: 100,
        };
        assert_relative_eq!(par.blow_up_lower(), 10.0 / 3.0, max_relative = 1e-14);
        assert_eq!(envelope_lower(0.0, &par).unwrap(), 0.1);
        match envelope_upper(10.0 / 3.0, &par) {
            Err(Error::Domain { blow_up_time: Some(t), .. }) => assert_relative_eq!(t, 10.0 / 3.0, max_relative = 1e-14),
            other => panic!("expected domain error, got {other:?}"),
        }
        let h = hitting_time_bounds(&par, 0.2).unwrap();
        assert_relative_eq!(h.upper_env, 5.0 / 3.0, max_relative = 1e-14);
        assert_eq!(h.upper_env, h.lower_env);
    }

    #[test]
    fn hitting_ratio_with_slack() {
        let par = EnvelopeParams {
            gamma: 1.0,
            lam_prod: 1.0,
            c0: 0.5,
            sqrt_m: 1.0,
            p: 3,
            n: 100,
        };
        let h = hitting_time_bounds(&par, 0.2).unwrap();
        assert_relative_eq!(h.lower_env / h.upper_env, 3.0, max_relative = 1e-14);
        assert!(hitting_time_bounds(&par, 0.05).is_err());
    }

    #[test]
    fn heuristic_matches_envelope_and_scales() {
        let t = predict_hitting_heuristic(1.5, 2.0, 3, 0.1, 400).unwrap();
        let par = EnvelopeParams {
            gamma: 1.5,
            lam_prod: 2.0,
            c0: 0.0,
            sqrt_m: 7.0,
            p: 3,
            n: 400,
        };
        let h = hitting_time_bounds(&par, 0.1).unwrap();
        assert_relative_eq!(to_rescaled_time(t, 7.0), h.upper_env, max_relative = 1e-12);
        let t2 = predict_hitting_heuristic(1.5, 4.0, 3, 0.1, 400).unwrap();
        assert_relative_eq!(t2, t / 2.0, max_relative = 1e-14);
        let near = predict_hitting_heuristic(0.1 * 20.0 * (1.0 - 1e-9), 1.0, 3, 0.1, 400).unwrap();
        assert!(near < 1e-6);
    }

    #[test]
    fn regimes() {
        assert_eq!(regime_classifier(1000, 3, 1e7), Regime::AllSpikes);
        assert_eq!(regime_classifier(1000, 3, 1e4), Regime::FirstSpike);
        assert_eq!(regime_classifier(1000, 3, 10.0), Regime::SubThreshold);
    }

    #[test]
    fn condition_examples() {
        let n = 100;
        let v = 1.0 / 10.0;
        let m0 = cm(&[&[v, v], &[v, v]]);
        assert!(condition1_member(&m0, n, 2.0, 0.5));
        assert!(!condition2_member(&m0, &[1.0, 1.0], 3, 2.0, 0.5));
        let sep = cm(&[&[0.1, 0.02], &[0.05, 0.2]]);
        assert!(condition2_member(&sep, &[1.0, 1.0], 3, 2.0, 0.5));
        let zero = cm(&[&[0.1, 0.0], &[0.05, 0.2]]);
        assert!(!condition2_member(&zero, &[1.0, 1.0], 3, 2.0, 0.5));
    }

    #[test]
    fn eps_n_scaling() {
        assert_relative_eq!(eps_n(1.0, 10_000, 3), 10_000f64.powf(-0.25), max_relative = 1e-14);
    }
}
