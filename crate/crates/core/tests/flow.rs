use nalgebra::DMatrix;
use spikeflow::dynamics::{evolve_correlations_only, integrate, FlowConfig, Termination};
use spikeflow::error::Error;
use spikeflow::manifold::{point_with_correlations, sample_uniform, tol_orth};
use spikeflow::model::{CorrelationMatrix, ModelParams, SpikedModel};
use spikeflow::population::{integrate_population, PopulationConfig};
use spikeflow::seed;

/// Exact solution of `ṁ = a(m² − m⁴)` (p = 3): `t(m) = [atanh m − 1/m]/a`,
/// inverted by bisection.
fn scalar_p3_exact(m0: f64, a: f64, t: f64) -> f64 {
    let phi = |m: f64| m.atanh() - 1.0 / m;
    let target = phi(m0) + a * t;
    let (mut lo, mut hi) = (m0, 1.0 - 1e-16);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn noiseless(p: usize, n: usize, lambdas: Vec<f64>, sqrt_m: f64, s: u64) -> SpikedModel {
    SpikedModel::noiseless(ModelParams::new(p, n, lambdas, sqrt_m), &mut seed::rng(s)).unwrap()
}

#[test]
fn single_spike_noiseless_flow_follows_scalar_ode() {
    let (lambda, sqrt_m) = (1.5, 2.0);
    let model = noiseless(3, 40, vec![lambda], sqrt_m, 1);
    let m0 = 0.2;
    let x0 = point_with_correlations(model.spikes(), &DMatrix::from_element(1, 1, m0), &mut seed::rng(2)).unwrap();
    let a = sqrt_m * 3.0 * lambda * lambda;
    let mut errors = Vec::new();
    for eta in [2e-3, 1e-3] {
        let cfg = FlowConfig {
            eta,
            t_max: 2.0,
            sample_dt: 0.05,
            stop_on_recovery: false,
            ..FlowConfig::default()
        };
        let traj = integrate(&model, &x0, &cfg).unwrap();
        let series = traj.series(0, 0);
        assert!(series.windows(2).all(|w| w[1] > w[0] || w[1] > 1.0 - 1e-9), "not increasing");
        assert!(*series.last().unwrap() > 0.999);
        let err = traj
            .times
            .iter()
            .zip(&series)
            .map(|(&t, &m)| (m - scalar_p3_exact(m0, a, t)).abs())
            .fold(0.0, f64::max);
        errors.push(err);
    }
    assert!(errors[1] < 5e-3, "error {:?}", errors);
    assert!(errors[1] < 0.7 * errors[0], "no first-order decrease: {:?}", errors);
}

#[test]
fn manifold_and_correlation_invariants_hold_along_noisy_flow() {
    let model = SpikedModel::from_seed(ModelParams::new(3, 25, vec![3.0, 2.0, 1.0], 20.0), 11).unwrap();
    let x0 = sample_uniform(25, 3, &mut seed::rng(12)).unwrap();
    let cfg = FlowConfig {
        t_max: 0.5,
        sample_dt: 0.01,
        stop_on_recovery: false,
        deterministic_reduction: true,
        ..FlowConfig::default()
    };
    let traj = integrate(&model, &x0, &cfg).unwrap();
    assert!(traj.terminal_x.as_ref().unwrap().defect() <= 10.0 * tol_orth(25));
    assert!(traj.times.windows(2).all(|w| w[0] < w[1]));
    for m in &traj.snapshots {
        assert!(m.max_singular_value() <= 1.0 + 1e-6);
    }
}

#[test]
fn energy_never_increases_beyond_tolerance() {
    let model = SpikedModel::from_seed(ModelParams::new(3, 20, vec![2.0, 1.0], 5.0), 21).unwrap();
    let mut x = sample_uniform(20, 2, &mut seed::rng(22)).unwrap();
    let cfg = FlowConfig {
        t_max: 0.01,
        sample_dt: 0.01,
        stop_on_recovery: false,
        deterministic_reduction: true,
        ..FlowConfig::default()
    };
    let mut h = model.hamiltonian(&x).unwrap();
    for _ in 0..60 {
        let traj = integrate(&model, &x, &cfg).unwrap();
        let next = traj.terminal_x.unwrap();
        let h_next = model.hamiltonian(&next).unwrap();
        assert!(h_next <= h + 1e-8 * h.abs() * traj.steps.max(1) as f64, "{h} → {h_next}");
        x = next;
        h = h_next;
    }
}

#[test]
fn halving_eta_converges_at_first_order() {
    let model = noiseless(3, 30, vec![2.0, 1.0], 1.0, 31);
    let m0 = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.05, 0.25]);
    let x0 = point_with_correlations(model.spikes(), &m0, &mut seed::rng(32)).unwrap();
    let sample_dt = 0.05;
    let t_max = 1.0;
    // reference: RK4 on the closed system (√M = 1 so clocks coincide)
    let m0c = CorrelationMatrix::new(m0.clone()).unwrap();
    let reference: Vec<DMatrix<f64>> = (1..=20)
        .map(|k| {
            let cfg = PopulationConfig {
                t_max: k as f64 * sample_dt,
                sample_dt: 1.0,
                stop_eps: None,
                ..PopulationConfig::default()
            };
            integrate_population(&m0c, &[2.0, 1.0], 3, &cfg).unwrap().last().matrix().clone()
        })
        .collect();
    let etas = [2e-3, 1e-3, 5e-4];
    let errors: Vec<f64> = etas
        .iter()
        .map(|&eta| {
            let cfg = FlowConfig {
                eta,
                t_max,
                sample_dt,
                stop_on_recovery: false,
                ..FlowConfig::default()
            };
            let traj = integrate(&model, &x0, &cfg).unwrap();
            assert_eq!(traj.len(), 21);
            traj.snapshots[1..]
                .iter()
                .zip(&reference)
                .map(|(m, r)| (m.matrix() - r).amax())
                .fold(0.0, f64::max)
        })
        .collect();
    // least-squares slope of log error against log eta
    let xs: Vec<f64> = etas.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = ys.iter().sum::<f64>() / 3.0;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!(slope >= 0.9, "order {slope}, errors {errors:?}");
}

#[test]
fn reduction_agrees_with_full_flow_without_noise() {
    let model = noiseless(3, 30, vec![2.0, 1.0], 1.0, 41);
    let m0 = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.05, 0.25]);
    let x0 = point_with_correlations(model.spikes(), &m0, &mut seed::rng(42)).unwrap();
    let cfg = FlowConfig {
        eta: 2e-5,
        t_max: 0.5,
        sample_dt: 0.05,
        stop_on_recovery: false,
        ..FlowConfig::default()
    };
    let full = integrate(&model, &x0, &cfg).unwrap();
    let reduced = evolve_correlations_only(&model, &CorrelationMatrix::new(m0).unwrap(), &cfg).unwrap();
    assert_eq!(full.times, reduced.times);
    assert!(reduced.terminal_x.is_none());
    let gap = full
        .snapshots
        .iter()
        .zip(&reduced.snapshots)
        .map(|(a, b)| (a.matrix() - b.matrix()).amax())
        .fold(0.0, f64::max);
    assert!(gap <= 1e-4, "gap {gap}");
}

#[test]
fn reduction_fixed_points_and_invariant_subspace() {
    let model = noiseless(3, 30, vec![2.0, 1.0], 3.0, 51);
    let cfg = FlowConfig {
        t_max: 2.0,
        sample_dt: 0.1,
        stop_on_recovery: false,
        ..FlowConfig::default()
    };
    let zero = evolve_correlations_only(&model, &CorrelationMatrix::new(DMatrix::zeros(2, 2)).unwrap(), &cfg).unwrap();
    assert!(zero.snapshots.iter().all(|m| m.matrix().amax() == 0.0));
    let diag = CorrelationMatrix::new(DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.3])).unwrap();
    let traj = evolve_correlations_only(&model, &diag, &cfg).unwrap();
    for m in &traj.snapshots {
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(1, 0), 0.0);
    }
    assert!(traj.last().get(0, 0) > 0.99 && traj.last().get(1, 1) > 0.99);
}

#[test]
fn reduction_rejects_invalid_start() {
    let model = noiseless(3, 30, vec![2.0, 1.0], 1.0, 61);
    let m0 = spikeflow::model::CorrelationMatrix::new(DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.1]));
    assert!(m0.is_err());
    let _ = model;
}

#[test]
fn overflow_reports_partial_trajectory() {
    let model = noiseless(3, 10, vec![1e150], 1e300, 71);
    let x0 = point_with_correlations(model.spikes(), &DMatrix::from_element(1, 1, 0.3), &mut seed::rng(72)).unwrap();
    let err = integrate(&model, &x0, &FlowConfig::default()).unwrap_err();
    assert!(matches!(err.source, Error::Integration { .. }));
    assert_eq!(err.partial.len(), 1);
    assert!(err.partial.terminal_x.is_some());
}

#[test]
fn step_cap_is_reported() {
    let model = noiseless(3, 10, vec![1.0], 1.0, 81);
    let x0 = point_with_correlations(model.spikes(), &DMatrix::from_element(1, 1, 0.1), &mut seed::rng(82)).unwrap();
    let cfg = FlowConfig {
        max_steps: 5,
        ..FlowConfig::default()
    };
    let traj = integrate(&model, &x0, &cfg).unwrap();
    assert_eq!(traj.termination, Termination::StepCap);
    assert_eq!(traj.steps, 5);
}
