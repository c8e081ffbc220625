//! Rescaled gradient flow `dX/dt = −∇H(X)` on the normalized Stiefel manifold.
//!
//! Explicit Euler steps followed by the polar retraction, with step size
//! `dt = eta·√N / (1 + ‖∇H‖_F)`. A step that raises `H` by more than
//! `1e−8·|H|` is rejected and retried with half the step.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{self, StiefelPoint};
use crate::model::{max_singular_value, CorrelationMatrix, SpikedModel, TOL_CORR};
use crate::population::{all_columns_matched, rhs_into, RhsScratch};

/// Relative slack allowed on the energy decrease of an accepted step.
pub const TOL_DESCENT: f64 = 1e-8;

const MAX_REJECTIONS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub eta: f64,
    pub t_max: f64,
    pub sample_dt: f64,
    pub stop_eps: f64,
    /// End the run as soon as every column is matched at `1 − stop_eps`.
    pub stop_on_recovery: bool,
    /// Cap on accepted steps.
    pub max_steps: usize,
    pub record_noise_drift: bool,
    /// Contract the noise tensor sequentially, making results independent of
    /// the thread count.
    pub deterministic_reduction: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            eta: 1e-2,
            t_max: 10.0,
            sample_dt: 0.01,
            stop_eps: 0.1,
            stop_on_recovery: true,
            max_steps: 1_000_000,
            record_noise_drift: false,
            deterministic_reduction: false,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} = {v} must be positive and finite")))
            }
        };
        positive("eta", self.eta)?;
        positive("t_max", self.t_max)?;
        positive("sample_dt", self.sample_dt)?;
        if !(0.0..1.0).contains(&self.stop_eps) {
            return Err(Error::InvalidParameter(format!(
                "stop_eps = {} must lie in [0, 1)",
                self.stop_eps
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Recovered,
    Horizon,
    StepCap,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Recovered => "recovered",
            Termination::Horizon => "horizon",
            Termination::StepCap => "step_cap",
        }
    }
}

/// Recorded correlations along a run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<CorrelationMatrix>,
    /// `L₀m` at each recorded time, when requested.
    pub noise_drift_snapshots: Option<Vec<DMatrix<f64>>>,
    pub terminal_x: Option<StiefelPoint>,
    pub termination: Termination,
    /// Accepted steps.
    pub steps: usize,
}

impl Trajectory {
    pub fn new(t0: f64, m0: CorrelationMatrix, drift0: Option<DMatrix<f64>>) -> Self {
        Self {
            times: vec![t0],
            snapshots: vec![m0],
            noise_drift_snapshots: drift0.map(|d| vec![d]),
            terminal_x: None,
            termination: Termination::Horizon,
            steps: 0,
        }
    }

    pub fn push(&mut self, t: f64, m: CorrelationMatrix, drift: Option<DMatrix<f64>>) {
        self.times.push(t);
        self.snapshots.push(m);
        if let (Some(ds), Some(d)) = (self.noise_drift_snapshots.as_mut(), drift) {
            ds.push(d);
        }
    }

    pub fn r(&self) -> usize {
        self.snapshots[0].r()
    }

    pub fn last(&self) -> &CorrelationMatrix {
        self.snapshots.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `|m_ij(t)|` series, `0`-based indices.
    pub fn series(&self, i: usize, j: usize) -> Vec<f64> {
        self.snapshots.iter().map(|m| m.get(i, j)).collect()
    }
}

/// Integration failure, keeping everything recorded up to the last good state.
#[derive(Debug)]
pub struct FlowError {
    pub source: Error,
    pub partial: Box<Trajectory>,
}

impl std::fmt::Display for FlowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} recorded samples)", self.source, self.partial.len())
    }
}

impl std::error::Error for FlowError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<FlowError> for Error {
    fn from(e: FlowError) -> Self {
        e.source
    }
}

/// Clock shared by both integrators: lands exactly on every multiple of
/// `sample_dt` and on `t_max`.
#[derive(Clone, Copy)]
struct SampleClock {
    sample_dt: f64,
    t_max: f64,
    k: u64,
}

impl SampleClock {
    fn new(cfg: &FlowConfig) -> Self {
        Self {
            sample_dt: cfg.sample_dt,
            t_max: cfg.t_max,
            k: 1,
        }
    }

    fn next(&self) -> f64 {
        (self.k as f64 * self.sample_dt).min(self.t_max)
    }

    /// Step from `t` of at most `dt`; returns the new time and whether it is
    /// a recording time.
    fn advance(&mut self, t: f64, dt: f64) -> (f64, f64, bool) {
        let target = self.next();
        if t + dt >= target {
            self.k += 1;
            while (self.k as f64 * self.sample_dt) <= target {
                self.k += 1;
            }
            (target - t, target, true)
        } else {
            (dt, t + dt, false)
        }
    }
}

fn step_size(eta: f64, n: usize, grad_norm: f64) -> f64 {
    eta * (n as f64).sqrt() / (1.0 + grad_norm)
}

/// Integrates the flow from `x0` until recovery, the horizon, or the step cap.
pub fn integrate(model: &SpikedModel, x0: &StiefelPoint, cfg: &FlowConfig) -> Result<Trajectory, FlowError> {
    let bare = |source: Error| FlowError {
        source,
        partial: Box::new(Trajectory::new(
            0.0,
            CorrelationMatrix::new_unchecked(DMatrix::zeros(model.r(), model.r())),
            None,
        )),
    };
    cfg.validate().map_err(bare)?;
    let m0 = model.correlations(x0).map_err(bare)?;
    let parallel = !cfg.deterministic_reduction;
    let drift = |x: &StiefelPoint| -> Result<Option<DMatrix<f64>>> {
        if cfg.record_noise_drift {
            model.noise_drift(x).map(Some)
        } else {
            Ok(None)
        }
    };

    let mut traj = Trajectory::new(0.0, m0, drift(x0).map_err(bare)?);
    let fail = |traj: &mut Trajectory, x: &StiefelPoint, source: Error| {
        let mut partial = std::mem::replace(traj, Trajectory::new(0.0, traj.snapshots[0].clone(), None));
        partial.terminal_x = Some(x.clone());
        FlowError {
            source,
            partial: Box::new(partial),
        }
    };

    let n = model.n();
    let r = model.r();
    let level = 1.0 - cfg.stop_eps;
    let mut x = x0.clone();
    let (mut h, mut g) = model.energy_and_gradient(&x, parallel).map_err(bare)?;
    let mut t = 0.0;
    let mut clock = SampleClock::new(cfg);
    let mut recorded_at = 0.0;

    let termination = loop {
        let m = correlation_of(model, &x);
        if cfg.stop_on_recovery && all_columns_matched(m.as_slice(), r, level) {
            break Termination::Recovered;
        }
        if t >= cfg.t_max {
            break Termination::Horizon;
        }
        if traj.steps >= cfg.max_steps {
            break Termination::StepCap;
        }
        let gnorm = g.matrix().norm();
        if !gnorm.is_finite() || !h.is_finite() {
            return Err(fail(&mut traj, &x, Error::Integration {
                t,
                reason: "non-finite gradient".into(),
            }));
        }
        let mut dt_try = step_size(cfg.eta, n, gnorm);
        let mut rejections = 0;
        let (x_new, h_new, g_new, t_new, record) = loop {
            let mut probe = clock;
            let (dt, t_next, record) = probe.advance(t, dt_try);
            let u = g.matrix() * (-dt);
            let x_new = manifold::polar_retract(&x, &u).map_err(|e| fail(&mut traj, &x, e))?;
            let (h_new, g_new) = model
                .energy_and_gradient(&x_new, parallel)
                .map_err(|e| fail(&mut traj, &x, e))?;
            if h_new <= h + TOL_DESCENT * h.abs() {
                clock = probe;
                break (x_new, h_new, g_new, t_next, record);
            }
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(fail(&mut traj, &x, Error::Integration {
                    t,
                    reason: "step rejected repeatedly; energy does not decrease".into(),
                }));
            }
            dt_try = 0.5 * dt;
        };
        x = x_new;
        h = h_new;
        g = g_new;
        t = t_new;
        traj.steps += 1;
        if record {
            let m = model.correlations(&x).map_err(|e| fail(&mut traj, &x, e))?;
            let d = drift(&x).map_err(|e| fail(&mut traj, &x, e))?;
            traj.push(t, m, d);
            recorded_at = t;
        }
    };
    if recorded_at != t {
        let m = model.correlations(&x).map_err(|e| fail(&mut traj, &x, e))?;
        let d = drift(&x).map_err(|e| fail(&mut traj, &x, e))?;
        traj.push(t, m, d);
    }
    traj.termination = termination;
    traj.terminal_x = Some(x);
    Ok(traj)
}

fn correlation_of(model: &SpikedModel, x: &StiefelPoint) -> DMatrix<f64> {
    model.spikes().matrix().tr_mul(x.matrix()) / model.n() as f64
}

/// `(H, ‖∇H‖_F)` of the noiseless Hamiltonian, from the correlations alone.
///
/// With `A_ij = λ_iλ_j m_ij^{p−1}` the Euclidean gradient is `−√M p V A`, and
/// the tangent projection removes `‖mᵀA + Aᵀm‖²/4` from `‖A‖²` (up to
/// the common factor `M p² N`).
pub fn population_energy_and_gradient_norm(m: &DMatrix<f64>, lambdas: &[f64], p: usize, n: usize, sqrt_m: f64) -> (f64, f64) {
    let r = m.nrows();
    let pi = p as i32;
    let a = DMatrix::from_fn(r, r, |i, j| lambdas[i] * lambdas[j] * m[(i, j)].powi(pi - 1));
    let energy: f64 = (0..r)
        .flat_map(|i| (0..r).map(move |j| (i, j)))
        .map(|(i, j)| lambdas[i] * lambdas[j] * m[(i, j)].powi(pi))
        .sum();
    let s = m.transpose() * &a + a.transpose() * m;
    let sq = (a.norm_squared() - s.norm_squared() / 4.0).max(0.0);
    let scale = sqrt_m * p as f64;
    (
        -sqrt_m * n as f64 * energy,
        scale * (n as f64 * sq).sqrt(),
    )
}

/// Euler integration of the closed correlation system (noise generator set to
/// zero) under the same stepping and acceptance rules as [`integrate`].
pub fn evolve_correlations_only(model: &SpikedModel, m0: &CorrelationMatrix, cfg: &FlowConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let r = model.r();
    if m0.r() != r {
        return Err(Error::shape(format!("{r}×{r}"), format!("{0}×{0}", m0.r())));
    }
    let s0 = m0.max_singular_value();
    if s0 > 1.0 + TOL_CORR {
        return Err(Error::ReductionBreakdown { t: 0.0, sigma_max: s0 });
    }
    let (p, n, sqrt_m) = (model.p(), model.n(), model.sqrt_m());
    let lambdas = model.lambdas();
    let level = 1.0 - cfg.stop_eps;
    let mut scratch = RhsScratch::new(r);
    let mut f = vec![0.0; r * r];
    let mut m = m0.matrix().clone();
    let mut traj = Trajectory::new(0.0, m0.clone(), None);
    let mut clock = SampleClock::new(cfg);
    let mut t = 0.0;
    let mut recorded_at = 0.0;
    let (mut h, mut gnorm) = population_energy_and_gradient_norm(&m, lambdas, p, n, sqrt_m);

    let termination = loop {
        if cfg.stop_on_recovery && all_columns_matched(m.as_slice(), r, level) {
            break Termination::Recovered;
        }
        if t >= cfg.t_max {
            break Termination::Horizon;
        }
        if traj.steps >= cfg.max_steps {
            break Termination::StepCap;
        }
        rhs_into(m.as_slice(), lambdas, p, &mut scratch, &mut f);
        let mut dt_try = step_size(cfg.eta, n, gnorm);
        let mut rejections = 0;
        let (m_new, t_new, record) = loop {
            let mut probe = clock;
            let (dt, t_next, record) = probe.advance(t, dt_try);
            let mut m_new = m.clone();
            for (x, fx) in m_new.as_mut_slice().iter_mut().zip(&f) {
                *x += dt * sqrt_m * fx;
            }
            let (h_new, g_new) = population_energy_and_gradient_norm(&m_new, lambdas, p, n, sqrt_m);
            if h_new <= h + TOL_DESCENT * h.abs() {
                clock = probe;
                h = h_new;
                gnorm = g_new;
                break (m_new, t_next, record);
            }
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(Error::Integration {
                    t,
                    reason: "step rejected repeatedly; energy does not decrease".into(),
                });
            }
            dt_try = 0.5 * dt;
        };
        m = m_new;
        t = t_new;
        traj.steps += 1;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                t,
                reason: "non-finite correlation".into(),
            });
        }
        let s = max_singular_value(&m);
        if s > 1.0 + TOL_CORR {
            return Err(Error::ReductionBreakdown { t, sigma_max: s });
        }
        if record {
            traj.push(t, CorrelationMatrix::new_unchecked(m.clone()), None);
            recorded_at = t;
        }
    };
    if recorded_at != t {
        traj.push(t, CorrelationMatrix::new_unchecked(m), None);
    }
    traj.termination = termination;
    Ok(traj)
}
