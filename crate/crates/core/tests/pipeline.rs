use nalgebra::DVector;
use proptest::prelude::*;

use pdkf_core::harness::report::{curves_csv, parse_curves_csv, to_db};
use pdkf_core::harness::{Experiment, ExperimentConfig, MsdReport};

fn small(runs: usize, horizon: usize, window: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        runs,
        horizon,
        window,
        lengths: vec![0, 1, 4],
        dkf_baseline: false,
        ..Default::default()
    };
    cfg.model.dynamics_scale = 0.95;
    cfg.network.nodes = 4;
    cfg
}

fn run(cfg: ExperimentConfig) -> MsdReport {
    Experiment::new(cfg).unwrap().run().unwrap()
}

#[test]
fn single_run_single_step_by_hand() {
    // Scalar model, no process noise, blind sensor: the estimate stays at the
    // zero prior while the state decays from 1 to 0.5.
    let cfg = ExperimentConfig::from_toml_str(
        r#"
        runs = 1
        horizon = 1
        window = 1
        lengths = [0]
        schemes = ["sequential"]
        dkf_baseline = false
        [model]
        preset = "explicit"
        dim = 1
        f = [0.5]
        g = [1.0]
        q = [0.0]
        pi0 = [1.0]
        [network]
        nodes = 1
        edges = []
        [sensors]
        preset = "explicit"
        [[sensors.nodes]]
        rows = 1
        h = [0.0]
        r = [1.0]
        "#,
    )
    .unwrap();
    let mut exp = Experiment::new(cfg).unwrap();
    exp.initial_state = Some(DVector::from_element(1, 1.0));
    let report = exp.run().unwrap();
    let arm = &report.arms[0];
    assert_eq!(arm.curve, vec![1.0, 0.25]);
    assert_eq!(arm.steady_per_node, vec![0.25]);
    assert_eq!(arm.final_mean_error, vec![0.5]);
}

#[test]
fn runs_are_deterministic() {
    let a = run(small(4, 60, 20));
    let b = run(small(4, 60, 20));
    assert_eq!(curves_csv(&a), curves_csv(&b));
}

#[test]
fn paired_noise_across_schemes() {
    let report = run(small(4, 80, 20));
    // Without exchange, and with full exchange, the schedule is irrelevant, so
    // identical noise must give identical numbers.
    for l in [0, 4] {
        let seq = report.arm("sequential", l).unwrap();
        let sto = report.arm("stochastic", l).unwrap();
        assert_eq!(seq.curve, sto.curve, "L={l}");
        assert_eq!(seq.run_steady, sto.run_steady, "L={l}");
    }
    let seq = report.arm("sequential", 1).unwrap();
    let sto = report.arm("stochastic", 1).unwrap();
    assert_ne!(seq.curve, sto.curve);
}

#[test]
fn full_exchange_curve_settles_to_a_floor() {
    let mut cfg = small(40, 1500, 500);
    cfg.lengths = vec![4];
    cfg.schemes.truncate(1);
    let report = run(cfg);
    let curve = &report.arms[0].curve;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let early = mean(&curve[1..11]);
    let late = mean(&curve[1000..1250]);
    let later = mean(&curve[1250..]);
    assert!(to_db(early) - to_db(late) > 3.0, "early {early} late {late}");
    assert!((to_db(late) - to_db(later)).abs() < 0.5, "late {late} later {later}");
}

#[test]
fn confidence_interval_scales_with_runs() {
    let half_width = |runs| {
        let mut cfg = small(runs, 300, 100);
        cfg.lengths = vec![1];
        cfg.schemes.truncate(1);
        let d = run(cfg).arms[0].run_network_steady();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    };
    let base = half_width(100);
    let doubled = half_width(200) / base;
    let quadrupled = half_width(400) / base;
    let within = |r: f64, target: f64| (r / target - 1.0).abs() <= 0.3;
    assert!(within(doubled, 0.5f64.sqrt()), "doubling ratio {doubled}");
    assert!(within(quadrupled, 0.5), "quadrupling ratio {quadrupled}");
}

#[test]
fn curves_csv_round_trips_a_real_run() {
    let report = run(small(3, 30, 10));
    let rows = parse_curves_csv(&curves_csv(&report)).unwrap();
    assert_eq!(rows.len(), report.arms.len() * 31);
    for (row, (arm, i)) in rows
        .iter()
        .zip(report.arms.iter().flat_map(|a| (0..31).map(move |i| (a, i))))
    {
        assert_eq!(
            (row.scheme.as_str(), row.l, row.iteration),
            (arm.scheme.as_str(), arm.l, i)
        );
        assert_eq!(row.msd_db, to_db(arm.curve[i]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn report_shape_and_positivity(seed in 0u64..1000, nodes in 3usize..7, runs in 1usize..4) {
        let mut cfg = small(runs, 20, 5);
        cfg.seed = seed;
        cfg.network.nodes = nodes;
        let report = run(cfg);
        prop_assert_eq!(report.arms.len(), 6);
        for arm in &report.arms {
            prop_assert_eq!(arm.curve.len(), 21);
            prop_assert_eq!(arm.steady_per_node.len(), nodes);
            prop_assert_eq!(arm.run_steady.len(), runs);
            prop_assert!(arm.curve.iter().all(|v| v.is_finite() && *v > 0.0));
        }
    }
}
