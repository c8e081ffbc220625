use spikeflow::dynamics::FlowConfig;
use spikeflow::experiments::*;
use spikeflow::model::DEFAULT_MEMORY_BUDGET;

fn spec(signal: Vec<Signal>, seeds: usize, master_seed: u64) -> SweepSpec {
    SweepSpec {
        grid: SweepGrid {
            n: vec![30],
            p: vec![3],
            lambdas: vec![vec![2.0]],
            signal,
        },
        seeds_per_cell: seeds,
        init: InitMode::Uniform,
        flow: FlowConfig {
            t_max: 2.0,
            sample_dt: 0.02,
            deterministic_reduction: true,
            ..FlowConfig::default()
        },
        eps: 0.1,
        master_seed,
        memory_budget: DEFAULT_MEMORY_BUDGET,
    }
}

#[test]
fn pure_noise_never_recovers() {
    let res = recovery_sweep(&spec(vec![Signal::SqrtM(0.0)], 6, 1), None).unwrap();
    assert_eq!(res.len(), 1);
    assert_eq!(res[0].recovery_rate, 0.0);
    assert_eq!(res[0].failures, 0);
    assert!(res[0].spike_rates.iter().all(|&r| r == 0.0));
}

#[test]
fn rates_are_fractions_and_grid_order_is_stable() {
    let s = spec(vec![Signal::SqrtM(1.0), Signal::M(400.0), Signal::Alpha(3.0)], 3, 2);
    let res = recovery_sweep(&s, None).unwrap();
    assert_eq!(res.iter().map(|c| c.cell.sqrt_m).collect::<Vec<_>>(), vec![1.0, 20.0, 30f64.powf(1.5)]);
    for c in &res {
        assert!((0.0..=1.0).contains(&c.recovery_rate));
        assert!(c.spike_rates.iter().all(|r| (0.0..=1.0).contains(r)));
        if let Some(m) = c.prediction_match_rate {
            assert!((0.0..=1.0).contains(&m));
        }
        assert_eq!(c.runs.len(), 3);
    }
    let csv = sweep_results_csv(&res);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("p,r,N,M,lambda_1,seeds,recovery_rate,prediction_match_rate,spike_rate_1,mean_T_1"));
}

#[test]
fn recovery_rate_does_not_fall_with_signal() {
    let s = spec(vec![Signal::SqrtM(0.5), Signal::SqrtM(5.0), Signal::SqrtM(200.0)], 12, 3);
    let res = recovery_sweep(&s, None).unwrap();
    let rates: Vec<f64> = res.iter().map(|c| c.recovery_rate).collect();
    // one-sided test at 95%: a drop larger than 1.645 binomial standard
    // errors of the difference counts as a violation
    for w in rates.windows(2) {
        let pooled = (w[0] + w[1]) / 2.0;
        let se = (2.0 * pooled * (1.0 - pooled) / 12.0).sqrt();
        assert!(w[0] - w[1] <= 1.645 * se + 1e-12, "{rates:?}");
    }
    assert!(rates[0] < rates[2] && rates[2] >= 0.75, "{rates:?}");
}

#[test]
fn sweeps_replay_byte_for_byte() {
    let s = spec(vec![Signal::SqrtM(10.0)], 2, 7);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = recovery_sweep(&s, Some(a.path())).unwrap();
    let rb = recovery_sweep(&s, Some(b.path())).unwrap();
    assert_eq!(sweep_results_csv(&ra), sweep_results_csv(&rb));
    let dir = ra[0].cell.dir_name();
    for k in 0..2 {
        let name = format!("run_{k}.csv");
        let fa = std::fs::read(a.path().join(&dir).join(&name)).unwrap();
        let fb = std::fs::read(b.path().join(&dir).join(&name)).unwrap();
        assert!(!fa.is_empty());
        assert_eq!(fa, fb);
    }
    let other = recovery_sweep(&spec(vec![Signal::SqrtM(10.0)], 2, 8), None).unwrap();
    assert_ne!(ra[0].runs[0].as_ref().unwrap().run_seed, other[0].runs[0].as_ref().unwrap().run_seed);
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = spec(vec![Signal::SqrtM(1.0)], 0, 0);
    assert!(recovery_sweep(&s, None).is_err());
    s.seeds_per_cell = 1;
    s.grid.signal.clear();
    assert!(recovery_sweep(&s, None).is_err());
}

#[test]
fn parity_decides_the_recovered_sign() {
    let flow = FlowConfig {
        t_max: 20.0,
        sample_dt: 0.05,
        stop_on_recovery: false,
        deterministic_reduction: true,
        ..FlowConfig::default()
    };
    let cell = |p: usize, init_m: f64| ParityCell {
        p,
        n: 40,
        lambda: 2.0,
        sqrt_m: 5.0,
        init_m,
        noiseless: true,
        seeds: 3,
    };
    let rows = parity_experiment(&[cell(4, -0.3), cell(4, 0.3), cell(3, -0.3), cell(3, 0.3)], &flow, 0.1, 5).unwrap();
    assert_eq!(rows[0].recovered_negative, 3);
    assert_eq!(rows[1].recovered_positive, 3);
    assert!(rows[2].max_m < 0.1 && rows[2].recovered_positive == 0);
    assert_eq!(rows[3].recovered_positive, 3);
    let csv = parity_table_csv(&rows);
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn concentration_matches_gaussian_limit_tail() {
    let mut rng = spikeflow::seed::rng(11);
    let table = concentration_experiment(400, 2, 2000, &mut rng).unwrap();
    let at = |t: f64| table.tail.iter().find(|(x, _)| (*x - t).abs() < 1e-12).map(|&(_, p)| p);
    assert_eq!(at(0.0), Some(1.0));
    let t3 = at(3.0).unwrap();
    assert!(t3 < 0.01, "{t3}");
    assert!(table.fit_c_rate > 0.0);
    assert!(concentration_experiment(400, 2, 999, &mut rng).is_err());
}
