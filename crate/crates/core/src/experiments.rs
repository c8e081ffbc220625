//! Monte-Carlo harnesses: concentration of the uniform measure, recovery
//! sweeps over a parameter grid, and the sign/parity table.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dynamics::{integrate, FlowConfig, Termination, Trajectory};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_trajectory_csv};
use crate::manifold::{self, StiefelPoint};
use crate::model::{ModelParams, SpikedModel, DEFAULT_MEMORY_BUDGET};
use crate::population::detect_elimination;
use crate::seed::{self, tag};
use crate::theory::{greedy_selection, init_matrix};

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Result of [`concentration_experiment`]. Thresholds are in units of
/// `1/√N`, so row `s` of the tail table is `P(|m_ij| > s/√N)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationTable {
    pub n: usize,
    pub r: usize,
    pub n_samples: usize,
    /// `(s, P(|m_ij| > s/√N))`, pooled over all entries.
    pub tail: Vec<(f64, f64)>,
    /// Fit of `log P = log C − c·N·t²` over the sub-Gaussian range.
    pub fit_c_prefactor: f64,
    pub fit_c_rate: f64,
    /// `(s, P(|m₁₁| < s/√N), 2Φ(s) − 1)`.
    pub small_ball: Vec<(f64, f64, f64)>,
    /// Kolmogorov–Smirnov distance between `√N·m₁₁` and `N(0, 1)`.
    pub ks_distance: f64,
}

pub const TAIL_GRID: [f64; 9] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];
pub const SMALL_BALL_GRID: [f64; 4] = [0.05, 0.1, 0.2, 0.4];

/// Draws `X ~ μ_{N×r}` against the canonical spikes `V = √N·[e₁ … e_r]`, so
/// `m_ij = X_ij / √N`.
pub fn concentration_experiment<R: Rng + ?Sized>(n: usize, r: usize, n_samples: usize, rng: &mut R) -> Result<ConcentrationTable> {
    if n_samples < 1000 {
        return Err(Error::InvalidParameter(format!("need at least 1000 samples, got {n_samples}")));
    }
    let sn = (n as f64).sqrt();
    let mut pooled = Vec::with_capacity(n_samples * r * r);
    let mut first = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = manifold::sample_uniform(n, r, rng)?;
        let xm = x.matrix();
        for j in 0..r {
            for i in 0..r {
                pooled.push(xm[(i, j)].abs());
            }
        }
        first.push(xm[(0, 0)] / sn);
    }
    pooled.sort_by(f64::total_cmp);
    let total = pooled.len() as f64;
    let tail: Vec<(f64, f64)> = TAIL_GRID
        .iter()
        .map(|&s| {
            let above = pooled.len() - pooled.partition_point(|&v| v <= s);
            (s, above as f64 / total)
        })
        .collect();

    // log-linear regression on points with enough mass and past the bulk
    let pts: Vec<(f64, f64)> = tail
        .iter()
        .filter(|&&(s, pr)| s >= 1.0 && pr > 0.0 && pr * total >= 20.0)
        .map(|&(s, pr)| (s * s, pr.ln()))
        .collect();
    let (fit_c_prefactor, fit_c_rate) = if pts.len() >= 2 {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        ((my - slope * mx).exp(), -slope)
    } else {
        (f64::NAN, f64::NAN)
    };

    let mut scaled: Vec<f64> = first.iter().map(|m| m * sn).collect();
    scaled.sort_by(f64::total_cmp);
    let ns = scaled.len() as f64;
    let small_ball = SMALL_BALL_GRID
        .iter()
        .map(|&s| {
            let inside = scaled.iter().filter(|v| v.abs() < s).count() as f64 / ns;
            (s, inside, 2.0 * std_normal_cdf(s) - 1.0)
        })
        .collect();
    let ks_distance = scaled
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let f = std_normal_cdf(v);
            ((k + 1) as f64 / ns - f).max(f - k as f64 / ns)
        })
        .fold(0.0, f64::max);

    Ok(ConcentrationTable {
        n,
        r,
        n_samples,
        tail,
        fit_c_prefactor,
        fit_c_rate,
        small_ball,
        ks_distance,
    })
}

/// How the signal strength of a cell is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Signal {
    #[serde(rename = "sqrt_m")]
    SqrtM(f64),
    #[serde(rename = "M")]
    M(f64),
    /// `M = N^α`.
    #[serde(rename = "alpha")]
    Alpha(f64),
}

impl Signal {
    pub fn sqrt_m(&self, n: usize) -> f64 {
        match *self {
            Signal::SqrtM(s) => s,
            Signal::M(m) => m.sqrt(),
            Signal::Alpha(a) => (n as f64).powf(a / 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    Uniform,
    ConditionedPositive,
    /// Initial correlations given row by row.
    Explicit { m0: Vec<Vec<f64>> },
}

impl InitMode {
    /// Draws `X₀` for `spikes` from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, spikes: &StiefelPoint, rng: &mut R) -> Result<StiefelPoint> {
        match self {
            InitMode::Uniform => manifold::sample_uniform(spikes.n(), spikes.r(), rng),
            InitMode::ConditionedPositive => manifold::sample_conditioned_positive(spikes, rng),
            InitMode::Explicit { m0 } => {
                let r = spikes.r();
                if m0.len() != r || m0.iter().any(|row| row.len() != r) {
                    return Err(Error::shape(format!("{r}×{r} m0"), format!("{} rows", m0.len())));
                }
                let m = DMatrix::from_fn(r, r, |i, j| m0[i][j]);
                manifold::point_with_correlations(spikes, &m, rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(rename = "N")]
    pub n: Vec<usize>,
    pub p: Vec<usize>,
    pub lambdas: Vec<Vec<f64>>,
    pub signal: Vec<Signal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub grid: SweepGrid,
    pub seeds_per_cell: usize,
    pub init: InitMode,
    #[serde(default)]
    pub flow: FlowConfig,
    /// Recovery level is `1 − eps`.
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_budget")]
    pub memory_budget: u64,
}

fn default_eps() -> f64 {
    0.1
}

fn default_budget() -> u64 {
    DEFAULT_MEMORY_BUDGET
}

/// One grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub p: usize,
    pub n: usize,
    pub lambdas: Vec<f64>,
    pub sqrt_m: f64,
}

impl Cell {
    pub fn r(&self) -> usize {
        self.lambdas.len()
    }

    pub fn params(&self, memory_budget: u64) -> ModelParams {
        let mut params = ModelParams::new(self.p, self.n, self.lambdas.clone(), self.sqrt_m);
        params.memory_budget = memory_budget;
        params
    }

    /// Stable identifier: FNV-1a of the canonical description.
    pub fn hash(&self) -> u64 {
        let lam: Vec<String> = self.lambdas.iter().map(|l| format!("{l:e}")).collect();
        let key = format!("p={};N={};lambdas={};sqrt_m={:e}", self.p, self.n, lam.join(","), self.sqrt_m);
        fnv1a(key.as_bytes())
    }

    pub fn dir_name(&self) -> String {
        format!("cell_{:016x}", self.hash())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.n.is_empty() || g.p.is_empty() || g.lambdas.is_empty() || g.signal.is_empty() {
            return Err(Error::InvalidParameter("every grid axis needs at least one value".into()));
        }
        if self.seeds_per_cell == 0 {
            return Err(Error::InvalidParameter("seeds_per_cell must be at least 1".into()));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::InvalidParameter(format!("eps = {} must lie in (0, 1)", self.eps)));
        }
        self.flow.validate()?;
        for cell in self.cells() {
            cell.params(self.memory_budget).validate()?;
        }
        Ok(())
    }

    /// Cartesian product in the order `N, p, lambdas, signal`.
    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let mut out = Vec::new();
        for &n in &g.n {
            for &p in &g.p {
                for lambdas in &g.lambdas {
                    for signal in &g.signal {
                        out.push(Cell {
                            p,
                            n,
                            lambdas: lambdas.clone(),
                            sqrt_m: signal.sqrt_m(n),
                        });
                    }
                }
            }
        }
        out
    }
}

/// Default mate-suppression level at finite `N`: `10·N^{−(p−1)/4}/√(log N)`.
pub fn default_eps_prime(n: usize, p: usize) -> f64 {
    let nf = n as f64;
    10.0 * nf.powf(-(p as f64 - 1.0) / 4.0) / nf.ln().sqrt()
}

/// What one seeded pipeline produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_seed: u64,
    /// Every column matched to a distinct spike at `1 − eps`.
    pub recovered: bool,
    /// Realized column → spike map equals the greedy prediction (only when
    /// both exist).
    pub prediction_match: Option<bool>,
    /// Same pairs in the same order as the greedy selection.
    pub ordering_match: Option<bool>,
    /// Crossing time per spike index, if that spike was recovered.
    pub spike_times: Vec<Option<f64>>,
    pub termination: Termination,
    pub steps: usize,
    pub final_m: DMatrix<f64>,
}

/// Per-run seeds: cell seed from the cell hash, then the run index.
pub fn run_seed(master: u64, cell: &Cell, k: usize) -> u64 {
    seed::derive(seed::derive(master, tag::CELL, cell.hash()), tag::RUN, k as u64)
}

/// Sample model, sample `X₀`, integrate, detect. Model and `X₀` use
/// independent streams derived from `run_seed`.
pub fn run_pipeline(
    cell: &Cell,
    init: &InitMode,
    flow: &FlowConfig,
    eps: f64,
    memory_budget: u64,
    run_seed: u64,
) -> Result<(RunOutcome, Trajectory)> {
    let model = SpikedModel::from_seed(cell.params(memory_budget), seed::derive(run_seed, tag::MODEL, 0))?;
    let mut rng = seed::rng(seed::derive(run_seed, tag::INIT, 0));
    let x0 = init.sample(model.spikes(), &mut rng)?;
    let m0 = model.correlations(&x0)?;
    let selection = greedy_selection(&init_matrix(&m0, model.lambdas(), model.p())).ok();
    let traj = integrate(&model, &x0, flow)?;
    let report = detect_elimination(&traj, eps, default_eps_prime(cell.n, cell.p), selection.as_ref());
    let r = cell.r();
    let realized = report.permutation(r);
    let predicted = selection.as_ref().and_then(|s| s.permutation(r));
    let mut spike_times = vec![None; r];
    for c in &report.ordering {
        spike_times[c.i] = Some(c.t);
    }
    let outcome = RunOutcome {
        run_seed,
        recovered: realized.is_some(),
        prediction_match: match (&realized, &predicted) {
            (Some(a), Some(b)) => Some(a == b),
            _ => None,
        },
        ordering_match: realized.as_ref().and(report.matched_prediction),
        spike_times,
        termination: traj.termination,
        steps: traj.steps,
        final_m: traj.last().matrix().clone(),
    };
    Ok((outcome, traj))
}

/// Aggregate over the seeds of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub seeds: usize,
    pub recovery_rate: f64,
    /// Over recovered runs with a well-defined prediction; `None` if there
    /// are none.
    pub prediction_match_rate: Option<f64>,
    pub spike_rates: Vec<f64>,
    /// Mean crossing time per spike over runs recovering it.
    pub mean_t: Vec<Option<f64>>,
    pub failures: usize,
    pub runs: Vec<std::result::Result<RunOutcome, String>>,
}

impl CellResult {
    fn aggregate(cell: Cell, runs: Vec<std::result::Result<RunOutcome, String>>) -> Self {
        let r = cell.r();
        let seeds = runs.len();
        let ok: Vec<&RunOutcome> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
        let recovered = ok.iter().filter(|o| o.recovered).count();
        let judged: Vec<bool> = ok.iter().filter(|o| o.recovered).filter_map(|o| o.prediction_match).collect();
        let prediction_match_rate =
            (!judged.is_empty()).then(|| judged.iter().filter(|&&b| b).count() as f64 / judged.len() as f64);
        let mut spike_rates = vec![0.0; r];
        let mut mean_t = vec![None; r];
        for i in 0..r {
            let times: Vec<f64> = ok.iter().filter_map(|o| o.spike_times[i]).collect();
            spike_rates[i] = times.len() as f64 / seeds as f64;
            if !times.is_empty() {
                mean_t[i] = Some(times.iter().sum::<f64>() / times.len() as f64);
            }
        }
        Self {
            cell,
            seeds,
            recovery_rate: recovered as f64 / seeds as f64,
            prediction_match_rate,
            spike_rates,
            mean_t,
            failures: seeds - ok.len(),
            runs,
        }
    }
}

/// Runs every `(cell, seed)` pipeline as an independent work item and
/// aggregates per cell. With `detail_dir`, each run's trajectory is written
/// to `detail_dir/<cell hash>/run_<k>.csv`.
pub fn recovery_sweep(spec: &SweepSpec, detail_dir: Option<&Path>) -> Result<Vec<CellResult>> {
    spec.validate()?;
    let cells = spec.cells();
    if let Some(dir) = detail_dir {
        for cell in &cells {
            std::fs::create_dir_all(dir.join(cell.dir_name()))?;
        }
    }
    let items: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..spec.seeds_per_cell).map(move |k| (c, k)))
        .collect();
    let outcomes: Vec<std::result::Result<RunOutcome, String>> = items
        .par_iter()
        .map(|&(c, k)| {
            let cell = &cells[c];
            let seed = run_seed(spec.master_seed, cell, k);
            let (outcome, traj) = run_pipeline(cell, &spec.init, &spec.flow, spec.eps, spec.memory_budget, seed)
                .map_err(|e| e.to_string())?;
            if let Some(dir) = detail_dir {
                let path = dir.join(cell.dir_name()).join(format!("run_{k}.csv"));
                let file = std::fs::File::create(path).map_err(|e| e.to_string())?;
                write_trajectory_csv(std::io::BufWriter::new(file), &traj).map_err(|e| e.to_string())?;
            }
            Ok(outcome)
        })
        .collect();
    let mut outcomes = outcomes.into_iter();
    let results = cells
        .into_iter()
        .map(|cell| {
            let runs: Vec<_> = outcomes.by_ref().take(spec.seeds_per_cell).collect();
            CellResult::aggregate(cell, runs)
        })
        .collect();
    Ok(results)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// `p,r,N,M,lambda_1..,seeds,recovery_rate,prediction_match_rate,spike_rate_1..,mean_T_1..`,
/// padded to the largest `r` in the sweep.
pub fn sweep_results_csv(results: &[CellResult]) -> String {
    let r_max = results.iter().map(|c| c.cell.r()).max().unwrap_or(0);
    let mut cols: Vec<String> = ["p", "r", "N", "M"].iter().map(|s| s.to_string()).collect();
    cols.extend((1..=r_max).map(|i| format!("lambda_{i}")));
    cols.extend(["seeds", "recovery_rate", "prediction_match_rate"].iter().map(|s| s.to_string()));
    cols.extend((1..=r_max).map(|i| format!("spike_rate_{i}")));
    cols.extend((1..=r_max).map(|i| format!("mean_T_{i}")));
    let mut out = cols.join(",");
    out.push('\n');
    for res in results {
        let c = &res.cell;
        let pad = |v: Vec<String>| -> Vec<String> {
            let mut v = v;
            v.resize(r_max, String::new());
            v
        };
        let mut row = vec![
            c.p.to_string(),
            c.r().to_string(),
            c.n.to_string(),
            fmt_f64(c.sqrt_m * c.sqrt_m),
        ];
        row.extend(pad(c.lambdas.iter().map(|&l| fmt_f64(l)).collect()));
        row.push(res.seeds.to_string());
        row.push(fmt_f64(res.recovery_rate));
        row.push(opt(res.prediction_match_rate));
        row.extend(pad(res.spike_rates.iter().map(|&v| fmt_f64(v)).collect()));
        row.extend(pad(res.mean_t.iter().map(|&v| opt(v)).collect()));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Per-run summary of one cell.
pub fn cell_runs_csv(res: &CellResult) -> String {
    let r = res.cell.r();
    let mut out = String::from("run,run_seed,status,recovered,prediction_match,termination,steps");
    for i in 1..=r {
        let _ = write!(out, ",T_{i}");
    }
    out.push('\n');
    for (k, run) in res.runs.iter().enumerate() {
        match run {
            Ok(o) => {
                let pm = o.prediction_match.map_or(String::new(), |b| b.to_string());
                let _ = write!(
                    out,
                    "{k},{},ok,{},{pm},{},{}",
                    o.run_seed,
                    o.recovered,
                    o.termination.as_str(),
                    o.steps
                );
                for t in &o.spike_times {
                    let _ = write!(out, ",{}", opt(*t));
                }
            }
            Err(e) => {
                let _ = write!(out, "{k},,failed:{},,,,", e.replace([',', '\n'], ";"));
                for _ in 0..r {
                    out.push(',');
                }
            }
        }
        out.push('\n');
    }
    out
}

/// One row of the sign table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParityRow {
    pub p: usize,
    pub init_m: f64,
    pub runs: usize,
    /// Final `m ≥ 1 − ε`.
    pub recovered_positive: usize,
    /// Final `m ≤ −(1 − ε)`.
    pub recovered_negative: usize,
    pub unrecovered: usize,
    /// Largest `m(t)` seen over all runs and times.
    pub max_m: f64,
    /// Smallest `m(t)` seen over all runs and times.
    pub min_m: f64,
}

/// Single-spike cell with a prescribed initial correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParityCell {
    pub p: usize,
    pub n: usize,
    pub lambda: f64,
    pub sqrt_m: f64,
    pub init_m: f64,
    pub noiseless: bool,
    pub seeds: usize,
}

/// Runs `r = 1` flows from `m(0) = init_m` and tabulates the terminal signs.
pub fn parity_experiment(cells: &[ParityCell], flow: &FlowConfig, eps: f64, master_seed: u64) -> Result<Vec<ParityRow>> {
    let mut rows = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let params = ModelParams::new(cell.p, cell.n, vec![cell.lambda], cell.sqrt_m);
        let runs: Vec<Result<Trajectory>> = (0..cell.seeds)
            .into_par_iter()
            .map(|k| {
                let s = seed::derive(master_seed, tag::RUN, ((c as u64) << 32) | k as u64);
                let mut rng = seed::rng(seed::derive(s, tag::INIT, 0));
                let model = if cell.noiseless {
                    SpikedModel::noiseless(params.clone(), &mut seed::rng(seed::derive(s, tag::MODEL, 0)))?
                } else {
                    SpikedModel::from_seed(params.clone(), seed::derive(s, tag::MODEL, 0))?
                };
                let m0 = DMatrix::from_element(1, 1, cell.init_m);
                let x0 = manifold::point_with_correlations(model.spikes(), &m0, &mut rng)?;
                Ok(integrate(&model, &x0, flow)?)
            })
            .collect();
        let mut row = ParityRow {
            p: cell.p,
            init_m: cell.init_m,
            runs: cell.seeds,
            recovered_positive: 0,
            recovered_negative: 0,
            unrecovered: 0,
            max_m: f64::NEG_INFINITY,
            min_m: f64::INFINITY,
        };
        for traj in runs {
            let traj = traj?;
            for m in &traj.snapshots {
                row.max_m = row.max_m.max(m.get(0, 0));
                row.min_m = row.min_m.min(m.get(0, 0));
            }
            let last = traj.last().get(0, 0);
            if last >= 1.0 - eps {
                row.recovered_positive += 1;
            } else if last <= -(1.0 - eps) {
                row.recovered_negative += 1;
            } else {
                row.unrecovered += 1;
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn parity_table_csv(rows: &[ParityRow]) -> String {
    let mut out = String::from("p,init_m,runs,recovered_positive,recovered_negative,unrecovered,max_m,min_m\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.p,
            fmt_f64(r.init_m),
            r.runs,
            r.recovered_positive,
            r.recovered_negative,
            r.unrecovered,
            fmt_f64(r.max_m),
            fmt_f64(r.min_m)
        );
    }
    out
}
