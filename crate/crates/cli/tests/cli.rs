use std::path::Path;

use osa_doa_cli::cli_main;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["osa-doa".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    cli_main(&argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
[dataset]
snr_levels = [0.0, 10.0]
reps = 1
validation_reps = 1

[cdae]
channels = [4]

[fc]
widths = [16]

[train]
cdae_batch_size = 16
fc_batch_size = 16
cdae_epochs = 2
cdae_decay_epochs = 0
fc_epochs = 2
cdae_lr = 0.001
fc_lr = 0.5

[bench]
trials = 8
snr_db = [0.0, 10.0]
"#;

#[test]
fn help_and_usage_errors() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["bench-snr", "--help"]), 0);
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["bench-snr", "--no-such-flag"]), 1);
    assert_eq!(run(&["bench-snr", "--precision", "f16"]), 1);
}

#[test]
fn missing_config_is_a_validation_error() {
    assert_eq!(run(&["bench-snr", "--config", "/definitely/not/here.toml"]), 1);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[array]\nelementz = 3\n").unwrap();
    assert_eq!(run(&["crlb", "--config", p(&cfg)]), 1);
}

#[test]
fn music_and_crlb_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("crlb.csv");
    assert_eq!(run(&["crlb", "--snr", "0,10", "--snapshots", "100,200", "--theta", "10", "--out", p(&out)]), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "theta_deg,snr_db,N,crlb_deg2_1,cond_F");
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 5);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!((rows[0][3] / rows[1][3] - 2.0).abs() < 1e-12);

    let music = dir.path().join("music.csv");
    assert_eq!(run(&["music", "--snr", "10", "--theta", "20", "--out", p(&music)]), 0);
    let text = std::fs::read_to_string(&music).unwrap();
    assert!(text.contains("# estimates_deg=20\n"));
    assert_eq!(run(&["music", "--snr", "10", "--theta", "20", "--arch", "osa,nosa"]), 1);
    assert_eq!(run(&["crlb", "--theta", "10", "--snapshots", "0"]), 1);
}

#[test]
fn bench_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let args = |out: &Path| {
        vec!["bench-snr", "--config", p(&cfg), "--seed", "7", "--estimators", "music,music_whitened", "--out", p(out)]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(&args(&a).iter().map(String::as_str).collect::<Vec<_>>()), 0);
    assert_eq!(run(&args(&b).iter().map(String::as_str).collect::<Vec<_>>()), 0);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    for key in ["# build_id=", "# config_hash=", "# seed=7", "# w_policy=", "# precision="] {
        assert!(text.contains(key), "missing {key}");
    }
    assert!(text.contains("snr_db,estimator,architecture,rmse_deg,trials,failures,crlb_deg,seed\n"));
}

#[test]
fn cdae_bench_needs_a_checkpoint() {
    assert_eq!(run(&["bench-snr", "--trials", "2", "--snr", "0"]), 1);
}

#[test]
fn train_eval_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = p(&cfg);
    let ds = dir.path().join("train.osad");
    let val = dir.path().join("val.osad");
    assert_eq!(run(&["gen-dataset", "--config", c, "--out", p(&ds)]), 0);
    assert_eq!(run(&["gen-dataset", "--config", c, "--split", "validation", "--out", p(&val)]), 0);
    let cdae = dir.path().join("cdae.osam");
    let args = ["train-cdae", "--config", c, "--dataset", p(&ds), "--validation", p(&val), "--out", p(&cdae)];
    assert_eq!(run(&args), 0);
    let model = dir.path().join("model.osam");
    let fc_args = |out: &Path| -> Vec<String> {
        ["train-fc", "--config", c, "--dataset", p(&ds), "--validation", p(&val), "--checkpoint", p(&cdae), "--out", p(out)]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    let strs = |v: &[String]| v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\u{0}");
    let a = fc_args(&model);
    assert_eq!(run(&strs(&a).split('\u{0}').collect::<Vec<_>>()), 0);
    let again = dir.path().join("model2.osam");
    let b = fc_args(&again);
    assert_eq!(run(&strs(&b).split('\u{0}').collect::<Vec<_>>()), 0);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap());

    let metrics = dir.path().join("eval.csv");
    assert_eq!(run(&["eval", "--config", c, "--checkpoint", p(&model), "--dataset", p(&val), "--out", p(&metrics)]), 0);
    assert!(std::fs::read_to_string(&metrics).unwrap().starts_with("metric,value\nsamples,242\n"));

    let out = dir.path().join("bench.csv");
    let bench = ["bench-snr", "--config", c, "--arch", "osa", "--checkpoint", p(&model), "--out", p(&out)];
    assert_eq!(run(&bench), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains(",cdae_dnn,osa,"));
    // the K=7 model cannot serve the K=4 array
    let bench = ["bench-snr", "--config", c, "--arch", "nosa", "--checkpoint", p(&model)];
    assert_eq!(run(&bench), 1);
    let wide = dir.path().join("eval64.csv");
    assert_eq!(run(&["eval", "--config", c, "--checkpoint", p(&model), "--dataset", p(&val), "--precision", "f64", "--out", p(&wide)]), 0);
    assert!(std::fs::read_to_string(&wide).unwrap().starts_with("metric,value\nsamples,242\n"));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("gc.csv");
    assert_eq!(run(&["grad-check", "--config", p(&cfg), "--out", p(&out)]), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().count() > 5);
}
