use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use spikeflow::dynamics::{integrate, Trajectory};
use spikeflow::experiments::{
    cell_runs_csv, concentration_experiment, default_eps_prime, recovery_sweep, sweep_results_csv, SweepSpec,
};
use spikeflow::io::{svg_line_chart, write_json, write_trajectory_csv};
use spikeflow::model::{CorrelationMatrix, SpikedModel};
use spikeflow::population::{detect_elimination, integrate_population, PopulationConfig, DEFAULT_EPS_PRIME};
use spikeflow::seed::{self, tag};
use spikeflow::theory::{predict as predict_report, GreedySelection};
use spikeflow::StiefelPoint;

use crate::config::{read_json, RunConfig};
use crate::{CliError, Globals};

fn load(g: &Globals) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(g.config_path()?)?;
    if g.deterministic {
        cfg.flow.deterministic_reduction = true;
    }
    let dir = g.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&dir)?;
    Ok((cfg, dir))
}

/// Model and init seeds: `--seed` wins, then the config, then master seed 0.
fn seeds(cfg: &RunConfig, g: &Globals) -> (u64, u64) {
    match g.seed {
        Some(s) => (seed::derive(s, tag::MODEL, 0), seed::derive(s, tag::INIT, 0)),
        None => (
            cfg.model.seed.unwrap_or_else(|| seed::derive(0, tag::MODEL, 0)),
            cfg.init.seed.unwrap_or_else(|| seed::derive(0, tag::INIT, 0)),
        ),
    }
}

fn write_csv(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    write_trajectory_csv(BufWriter::new(File::create(path)?), traj)?;
    Ok(())
}

fn prediction_json(cfg: &RunConfig, m0: &CorrelationMatrix) -> (Value, Option<GreedySelection>) {
    let m = &cfg.model;
    match predict_report(m0, &m.lambdas, m.p, m.n, cfg.sqrt_m(), cfg.detect.eps) {
        Ok(report) => (report.to_json(), Some(report.selection)),
        Err(e) => (json!({ "error": e.to_string() }), None),
    }
}

/// Initial correlations drawn against canonical spikes, for commands that
/// never build the noise tensor.
fn sampled_m0(cfg: &RunConfig, g: &Globals) -> Result<CorrelationMatrix, CliError> {
    let (_, init_seed) = seeds(cfg, g);
    let (n, r) = (cfg.model.n, cfg.model.r);
    let spikes = StiefelPoint::canonical(n, r)?;
    let x0 = cfg.init_mode().sample(&spikes, &mut seed::rng(init_seed))?;
    Ok(CorrelationMatrix::new(spikes.matrix().tr_mul(x0.matrix()) / n as f64)?)
}

fn emit_svg(cfg: &RunConfig, dir: &Path, name: &str, traj: &Trajectory, sel: Option<&GreedySelection>, title: &str) -> Result<(), CliError> {
    if cfg.output.emit_svg {
        let highlight = sel.map(|s| s.pairs.clone()).unwrap_or_default();
        fs::write(dir.join(name), svg_line_chart(traj, &highlight, cfg.output.log_time, title))?;
    }
    Ok(())
}

pub fn simulate(g: &Globals) -> Result<(), CliError> {
    let (cfg, dir) = load(g)?;
    let (model_seed, init_seed) = seeds(&cfg, g);
    let params = cfg.params();
    params.validate()?;
    let model = SpikedModel::from_seed(params, model_seed)?;
    let x0 = cfg.init_mode().sample(model.spikes(), &mut seed::rng(init_seed))?;
    let m0 = model.correlations(&x0)?;

    let mut header = serde_json::to_value(model.header()).map_err(|e| CliError::Config(e.to_string()))?;
    header["init_seed"] = json!(init_seed);
    write_json(&dir.join("model.json"), &header)?;
    let (prediction, selection) = prediction_json(&cfg, &m0);
    write_json(&dir.join("prediction.json"), &prediction)?;

    let (traj, failure) = match integrate(&model, &x0, &cfg.flow) {
        Ok(t) => (t, None),
        Err(e) => (*e.partial, Some(e.source)),
    };
    write_csv(&dir.join("trajectory.csv"), &traj)?;
    let eps_prime = cfg.detect.eps_prime.unwrap_or_else(|| default_eps_prime(cfg.model.n, cfg.model.p));
    let report = detect_elimination(&traj, cfg.detect.eps, eps_prime, selection.as_ref());
    let mut elim = report.to_json();
    elim["termination"] = json!(traj.termination.as_str());
    elim["partial"] = json!(failure.is_some());
    if let Some(e) = &failure {
        elim["error"] = json!(e.to_string());
    }
    write_json(&dir.join("elimination.json"), &elim)?;
    let title = format!(
        "p={} N={} lambda={:?} sqrt(M)={}",
        cfg.model.p,
        cfg.model.n,
        cfg.model.lambdas,
        cfg.sqrt_m()
    );
    emit_svg(&cfg, &dir, "trajectory.svg", &traj, selection.as_ref(), &title)?;

    if let Some(e) = failure {
        return Err(CliError::Integration(format!(
            "{e} (partial outputs in {})",
            dir.display()
        )));
    }
    println!(
        "simulate: {} after {} steps, t = {:.4}, recovered pairs {:?}, matched prediction {:?} -> {}",
        traj.termination.as_str(),
        traj.steps,
        traj.times.last().copied().unwrap_or(0.0),
        report.pairs().iter().map(|&(i, j)| (i + 1, j + 1)).collect::<Vec<_>>(),
        report.matched_prediction,
        dir.display()
    );
    Ok(())
}

fn initial_correlations(cfg: &RunConfig, g: &Globals) -> Result<CorrelationMatrix, CliError> {
    match &cfg.init.m0 {
        Some(rows) => {
            let r = cfg.model.r;
            Ok(CorrelationMatrix::new(nalgebra_rows(rows, r))?)
        }
        None => sampled_m0(cfg, g),
    }
}

fn nalgebra_rows(rows: &[Vec<f64>], r: usize) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(r, r, |i, j| rows[i][j])
}

pub fn population(g: &Globals) -> Result<(), CliError> {
    let (cfg, dir) = load(g)?;
    let m0 = initial_correlations(&cfg, g)?;
    let (prediction, selection) = prediction_json(&cfg, &m0);
    write_json(&dir.join("prediction.json"), &prediction)?;
    let pcfg = PopulationConfig {
        t_max: cfg.flow.t_max,
        sample_dt: cfg.flow.sample_dt,
        stop_eps: cfg.flow.stop_on_recovery.then_some(cfg.flow.stop_eps),
        ..PopulationConfig::default()
    };
    let traj = integrate_population(&m0, &cfg.model.lambdas, cfg.model.p, &pcfg)?;
    write_csv(&dir.join("population.csv"), &traj)?;
    let eps_prime = cfg.detect.eps_prime.unwrap_or(DEFAULT_EPS_PRIME);
    let report = detect_elimination(&traj, cfg.detect.eps, eps_prime, selection.as_ref());
    let mut elim = report.to_json();
    elim["termination"] = json!(traj.termination.as_str());
    write_json(&dir.join("elimination.json"), &elim)?;
    let title = format!("population p={} lambda={:?}", cfg.model.p, cfg.model.lambdas);
    emit_svg(&cfg, &dir, "population.svg", &traj, selection.as_ref(), &title)?;
    println!(
        "population: {} at t = {:.4}, ordering {:?}, matched prediction {:?} -> {}",
        traj.termination.as_str(),
        traj.times.last().copied().unwrap_or(0.0),
        report.pairs().iter().map(|&(i, j)| (i + 1, j + 1)).collect::<Vec<_>>(),
        report.matched_prediction,
        dir.display()
    );
    Ok(())
}

pub fn predict(g: &Globals) -> Result<(), CliError> {
    let (cfg, dir) = load(g)?;
    let m0 = initial_correlations(&cfg, g)?;
    let m = &cfg.model;
    let report = predict_report(&m0, &m.lambdas, m.p, m.n, cfg.sqrt_m(), cfg.detect.eps)?;
    write_json(&dir.join("prediction.json"), &report.to_json())?;
    println!(
        "predict: selection {:?}, r_c = {}, regime {} -> {}",
        report.selection.pairs.iter().map(|&(i, j)| (i + 1, j + 1)).collect::<Vec<_>>(),
        report.selection.r_c(),
        report.regime.as_str(),
        dir.display()
    );
    Ok(())
}

pub fn concentration(g: &Globals, n: usize, r: usize, samples: usize) -> Result<(), CliError> {
    if samples < 1000 {
        return Err(CliError::Config(format!("--samples = {samples} must be at least 1000")));
    }
    if r == 0 || r > n {
        return Err(CliError::Config(format!("need 1 ≤ r ≤ N, got r = {r}, N = {n}")));
    }
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    let mut rng = seed::rng(seed::derive(g.seed.unwrap_or(0), tag::INIT, 0));
    let table = concentration_experiment(n, r, samples, &mut rng)?;
    let value = serde_json::to_value(&table).map_err(|e| CliError::Config(e.to_string()))?;
    write_json(&dir.join("concentration.json"), &value)?;
    println!(
        "concentration: N = {n}, r = {r}, {samples} samples, KS distance {:.4}, fitted tail {:.3}·exp(−{:.3}·N·t²) -> {}",
        table.ks_distance,
        table.fit_c_prefactor,
        table.fit_c_rate,
        dir.display()
    );
    Ok(())
}

pub fn sweep(g: &Globals) -> Result<(), CliError> {
    let mut spec: SweepSpec = read_json(g.config_path()?)?;
    if let Some(s) = g.seed {
        spec.master_seed = s;
    }
    if g.deterministic {
        spec.flow.deterministic_reduction = true;
    }
    spec.validate()?;
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let cells_dir = dir.join("cells");
    fs::create_dir_all(&cells_dir)?;
    let results = recovery_sweep(&spec, Some(&cells_dir))?;
    fs::write(dir.join("results.csv"), sweep_results_csv(&results))?;
    let mut failures = 0;
    for res in &results {
        fs::write(cells_dir.join(res.cell.dir_name()).join("runs.csv"), cell_runs_csv(res))?;
        failures += res.failures;
    }
    println!(
        "sweep: {} cells × {} seeds, {} failed runs -> {}",
        results.len(),
        spec.seeds_per_cell,
        failures,
        dir.display()
    );
    Ok(())
}
