use osa_doa::bench::{
    emit_csv, read_csv, run_rmse_vs_snapshots, run_rmse_vs_snr, run_two_source, Architecture, EstimatorKind,
    Scenario, Sweep,
};
use osa_doa::config::Config;

fn scenario(sweep: Sweep, truth: Vec<f64>) -> Scenario {
    let mut cfg = Config::default();
    cfg.bench.estimators = vec!["music".into(), "music_whitened".into()];
    cfg.bench.trials = 40;
    cfg.bench.seed = 3;
    Scenario::from_config(&cfg, sweep, truth).unwrap()
}

fn snr(values: &[f64]) -> Sweep {
    Sweep::Snr { values_db: values.to_vec(), snapshots: 100 }
}

#[test]
fn table_shape_and_determinism() {
    let s = scenario(snr(&[-10.0, 0.0, 10.0]), vec![10.1]);
    let a = run_rmse_vs_snr(&s, &[]).unwrap();
    assert_eq!(a.rows.len(), 3 * 2 * 2);
    assert_eq!(a.sweep_var, "snr_db");
    let b = run_rmse_vs_snr(&s, &[]).unwrap();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    emit_csv(&a, &p1).unwrap();
    emit_csv(&b, &p2).unwrap();
    let bytes = std::fs::read(&p1).unwrap();
    assert_eq!(bytes, std::fs::read(&p2).unwrap());
    assert_eq!(std::str::from_utf8(&bytes).unwrap().lines().filter(|l| !l.starts_with('#')).count(), 13);
    assert_eq!(read_csv(&p1).unwrap(), a);
}

#[test]
fn off_grid_floor_is_reached_and_respected() {
    let s = scenario(snr(&[10.0]), vec![10.1]);
    let t = run_rmse_vs_snr(&s, &[]).unwrap();
    for r in &t.rows {
        assert!(r.rmse_deg >= 0.1 - 1e-9, "{r:?}");
    }
    let r = t.row(10.0, EstimatorKind::MusicWhitened, Architecture::Osa).unwrap();
    assert!(r.rmse_deg <= 0.15);
}

#[test]
fn two_sources_reach_the_floor() {
    let s = scenario(snr(&[10.0]), vec![20.1, 10.1]);
    let t = run_two_source(&s, &[]).unwrap();
    let r = t.row(10.0, EstimatorKind::MusicWhitened, Architecture::Osa).unwrap();
    assert!((r.rmse_deg - 0.1).abs() < 1e-9, "{r:?}");
    assert!(run_two_source(&scenario(snr(&[10.0]), vec![10.1]), &[]).is_err());
}

#[test]
fn snapshot_sweep_reaches_floor_at_large_n() {
    let mut s = scenario(Sweep::Snapshots { values: vec![10, 1000], snr_db: -13.0 }, vec![10.1]);
    s.estimators = vec![EstimatorKind::MusicWhitened];
    s.architectures = vec![Architecture::Osa];
    let t = run_rmse_vs_snapshots(&s, &[]).unwrap();
    assert_eq!(t.sweep_var, "snapshots");
    let small = t.rows[0].rmse_deg;
    let large = t.rows[1].rmse_deg;
    assert!(large <= small);
    assert!(large < 0.2, "{large}");
}

#[test]
fn rejects_bad_scenarios() {
    let mut s = scenario(snr(&[0.0]), vec![10.1]);
    s.trials = 0;
    assert!(run_rmse_vs_snr(&s, &[]).is_err());
    let mut s = scenario(snr(&[0.0]), vec![10.1]);
    s.estimators = vec![EstimatorKind::CdaeDnn];
    assert!(run_rmse_vs_snr(&s, &[]).is_err(), "no checkpoint");
    s.fixed_w = false;
    assert!(run_rmse_vs_snr(&s, &[]).is_err(), "per-trial combiners");
    let s = scenario(snr(&[0.0]), vec![10.1]);
    assert!(run_rmse_vs_snapshots(&s, &[]).is_err());
}

#[test]
fn per_trial_combiners_are_supported() {
    let mut s = scenario(snr(&[0.0]), vec![-30.0]);
    s.fixed_w = false;
    let t = run_rmse_vs_snr(&s, &[]).unwrap();
    assert!(t.metadata.w_policy.ends_with("per_trial"));
    assert!(t.rows.iter().all(|r| r.failures == 0 && r.rmse_deg.is_finite()));
}
