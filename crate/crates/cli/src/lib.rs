//! `osa-doa` command line.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for
//! failures while running.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use osa_doa::bench::{
    read_csv, run_rmse_vs_snapshots, run_rmse_vs_snr, run_two_source, write_csv, Architecture, EstimatorKind,
    ResultTable, Scenario, Sweep, TrainedModel,
};
use osa_doa::cdae_dnn::{build_cdae, build_fc, denoising_ratios, validation_bce, CdaeDnn};
use osa_doa::config::{Config, Precision};
use osa_doa::crlb::{crlb, fisher_matrix};
use osa_doa::dataset::{load_dataset, save_dataset, Dataset, Payload};
use osa_doa::music::{music_spectrum_full, select_peaks, MusicConfig};
use osa_doa::nn::{grad_check, load_checkpoint, save_checkpoint, GradCheckConfig, LossKind, Scalar, Tensor};
use osa_doa::pipeline::{datasets, train_cdae_stage, train_fc_stage};
use osa_doa::rng::{derive_seed, rng_from_seed, stream};
use osa_doa::{build_beamformer, sample_covariance, simulate_snapshots, ArrayConfig, Error, Result, SimParams};

/// Build identifier embedded in every result file.
pub const BUILD_ID: &str = env!("OSA_DOA_BUILD_ID");

#[derive(Debug, Parser)]
#[command(name = "osa-doa", version = BUILD_ID, about = "DOA estimation for hybrid arrays with overlapped subarrays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a training or validation dataset.
    GenDataset {
        #[command(flatten)]
        common: Common,
        /// Which split to generate.
        #[arg(long, default_value = "train", value_parser = ["train", "validation"])]
        split: String,
    },
    /// Train the denoising autoencoder and write its checkpoint.
    TrainCdae {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train the classifier on a frozen autoencoder and write the full model.
    TrainFc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Autoencoder checkpoint from `train-cdae`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Validation metrics of a trained model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset to evaluate on (default: the configured validation set).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// MUSIC spectrum of one simulated covariance.
    Music {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: PointArgs,
        /// Skip whitening by (WᴴW)^(-1/2).
        #[arg(long)]
        no_whiten: bool,
    },
    /// Cramer-Rao bound over SNR, snapshot count and source angle.
    Crlb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: PointArgs,
        /// Sources present in every scenario besides the swept one.
        #[arg(long, value_delimiter = ',')]
        with: Vec<f64>,
    },
    /// RMSE against SNR.
    BenchSnr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// RMSE against the number of snapshots.
    BenchSnapshots {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Two-source RMSE against SNR.
    #[command(name = "bench-2src")]
    Bench2src {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Finite-difference gradient check of the configured networks (f64).
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; missing keys take the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed of the command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (CSV goes to stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Network arithmetic.
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Share one analog combiner across all samples and trials.
    #[arg(long)]
    fixed_w: Option<bool>,
    /// Array partition: osa, nosa, or both for the benchmarks.
    #[arg(long, value_delimiter = ',')]
    arch: Vec<String>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Training dataset (default: generated from the config).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Validation dataset (default: generated from the config).
    #[arg(long)]
    validation: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PointArgs {
    /// SNR values in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Vec<f64>,
    /// Snapshot counts N.
    #[arg(long, value_delimiter = ',')]
    snapshots: Vec<usize>,
    /// Source angles in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Vec<f64>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Monte-Carlo trials per point.
    #[arg(long)]
    trials: Option<usize>,
    /// SNR points in dB (fixed SNR for the snapshot sweep).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Vec<f64>,
    /// Snapshot points (fixed N for the SNR sweeps).
    #[arg(long, value_delimiter = ',')]
    snapshots: Vec<usize>,
    /// Any of cdae_dnn, music, music_whitened.
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    /// Trained models, one per array partition (matched by K).
    #[arg(long, value_delimiter = ',')]
    checkpoint: Vec<PathBuf>,
    /// True angles in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Vec<f64>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_main(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(p) = &common.precision {
        cfg.train.precision = Precision::parse(p)?;
    }
    if let Some(f) = common.fixed_w {
        cfg.sim.fixed_w = f;
    }
    for a in &common.arch {
        Architecture::parse(a)?;
    }
    Ok(cfg)
}

/// The single architecture a non-sweep command works on (default: osa).
fn single_arch(cfg: &Config, arch: &[String]) -> Result<(Architecture, ArrayConfig)> {
    let arch = match arch {
        [] => Architecture::Osa,
        [one] => Architecture::parse(one)?,
        _ => return Err(Error::Config("this command takes a single --arch".into())),
    };
    Ok((arch, arch.config(&cfg.array()?)?))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn require_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenDataset { common, split } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.dataset.seed = s;
            }
            let (_, array) = single_arch(&cfg, &common.arch)?;
            let out = require_out(&common)?;
            let ds = osa_doa::dataset::generate_dataset(&cfg.dataset_spec(split == "validation"), &array)?;
            save_dataset(&ds, out, Payload::F64)?;
            eprintln!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
        Command::TrainCdae { common, data } => {
            let cfg = train_config(&common)?;
            let (train, val) = load_sets(&cfg, &common, &data)?;
            let out = require_out(&common)?;
            let k = train.k();
            let (report, val_loss) = match cfg.train.precision {
                Precision::F32 => {
                    let (m, r) = train_cdae_stage::<f32>(&cfg, k, &train, Some(&val))?;
                    save_checkpoint(&m, out)?;
                    (r.clone(), median_ratio(&m, &val)?)
                }
                Precision::F64 => {
                    let (m, r) = train_cdae_stage::<f64>(&cfg, k, &train, Some(&val))?;
                    save_checkpoint(&m, out)?;
                    (r.clone(), median_ratio(&m, &val)?)
                }
            };
            eprintln!(
                "cdae: loss {:.6} -> {:.6}, validation mse {:.6}, median denoising ratio {:.4}",
                report.initial_loss,
                report.history.last().copied().unwrap_or(f64::NAN),
                report.validation_loss.unwrap_or(f64::NAN),
                val_loss
            );
            Ok(())
        }
        Command::TrainFc { common, data, checkpoint } => {
            let cfg = train_config(&common)?;
            let (train, val) = load_sets(&cfg, &common, &data)?;
            let out = require_out(&common)?;
            let bce = match cfg.train.precision {
                Precision::F32 => fit_fc::<f32>(&cfg, &checkpoint, &train, &val, out)?,
                Precision::F64 => fit_fc::<f64>(&cfg, &checkpoint, &train, &val, out)?,
            };
            eprintln!("fc: validation bce {bce:.6}");
            Ok(())
        }
        Command::Eval { common, dataset, checkpoint } => {
            let cfg = load_config(&common)?;
            let (_, array) = single_arch(&cfg, &common.arch)?;
            let ds = match dataset {
                Some(p) => load_dataset(&p)?,
                None => datasets(&cfg, &array)?.1,
            };
            let model = TrainedModel::load(&checkpoint, &array, cfg.train.precision)?;
            let text = match &model {
                TrainedModel::F32(m) => eval_metrics(m, &ds)?,
                TrainedModel::F64(m) => eval_metrics(m, &ds)?,
            };
            emit(common.out.as_deref(), text.as_bytes())
        }
        Command::Music { common, point, no_whiten } => {
            let cfg = load_config(&common)?;
            let (_, array) = single_arch(&cfg, &common.arch)?;
            let thetas = or_default(point.theta, cfg.bench.truth_deg.clone());
            let snr = single(&point.snr, *cfg.bench.snr_db.last().unwrap_or(&10.0), "--snr")?;
            let n = single(&point.snapshots, cfg.sim.snapshots, "--snapshots")?;
            let seed = common.seed.unwrap_or(cfg.bench.seed);
            let w = build_beamformer(&array, &cfg.sim.phase_policy, cfg.sim.w_seed)?;
            let params = SimParams::with_noise_power(snr, cfg.sim.noise_power, n, &thetas, derive_seed(seed, stream::TRIAL, 0))?;
            let c = sample_covariance(&simulate_snapshots(&array, &w, &params)?)?.matrix;
            let mcfg = MusicConfig::new(array.grid(), thetas.len(), !no_whiten);
            let spec = music_spectrum_full(&c, &w, &array, &mcfg)?;
            let peaks = select_peaks(&spec.values, thetas.len())?;
            let grid = array.grid();
            let mut text = format!("# build_id={BUILD_ID}\n# config_hash={}\n# seed={seed}\n# estimates_deg=", cfg.hash());
            text.push_str(&peaks.iter().map(|&i| grid.angle(i).to_string()).collect::<Vec<_>>().join(" "));
            text.push_str("\ntheta_deg,spectrum\n");
            for (i, v) in spec.values.iter().enumerate() {
                text.push_str(&format!("{},{v}\n", grid.angle(i)));
            }
            emit(common.out.as_deref(), text.as_bytes())
        }
        Command::Crlb { common, point, with } => {
            let cfg = load_config(&common)?;
            let (_, array) = single_arch(&cfg, &common.arch)?;
            let thetas = or_default(point.theta, vec![cfg.bench.truth_deg.first().copied().unwrap_or(10.0)]);
            let snrs = or_default(point.snr, cfg.bench.snr_db.clone());
            let ns = or_default(point.snapshots, vec![cfg.sim.snapshots]);
            let w = build_beamformer(&array, &cfg.sim.phase_policy, common.seed.unwrap_or(cfg.sim.w_seed))?;
            let q = 1 + with.len();
            let mut text = format!("# build_id={BUILD_ID}\n# config_hash={}\n# w_seed={}\ntheta_deg,snr_db,N", cfg.hash(), w.seed);
            for i in 1..=q {
                text.push_str(&format!(",crlb_deg2_{i}"));
            }
            text.push_str(",cond_F\n");
            for &theta in &thetas {
                let mut sources = vec![theta];
                sources.extend(&with);
                for &snr in &snrs {
                    let s2 = cfg.sim.noise_power * 10f64.powf(snr / 10.0);
                    let info = fisher_matrix(&array, &w, &sources, s2, cfg.sim.noise_power)?;
                    for &n in &ns {
                        let r = crlb(&info, n)?;
                        text.push_str(&format!("{theta},{snr},{n}"));
                        for v in r.per_source_deg2() {
                            text.push_str(&format!(",{v}"));
                        }
                        text.push_str(&format!(",{}\n", r.condition));
                    }
                }
            }
            emit(common.out.as_deref(), text.as_bytes())
        }
        Command::BenchSnr { common, sweep } => bench(common, sweep, BenchKind::Snr),
        Command::BenchSnapshots { common, sweep } => bench(common, sweep, BenchKind::Snapshots),
        Command::Bench2src { common, sweep } => bench(common, sweep, BenchKind::TwoSource),
        Command::GradCheck { common } => {
            let cfg = load_config(&common)?;
            let (_, array) = single_arch(&cfg, &common.arch)?;
            grad_check_command(&cfg, &array, common.seed.unwrap_or(0), common.out.as_deref())
        }
    }
}

fn or_default<T>(v: Vec<T>, default: Vec<T>) -> Vec<T> {
    if v.is_empty() {
        default
    } else {
        v
    }
}

fn single<T: Copy>(v: &[T], default: T, flag: &str) -> Result<T> {
    match v {
        [] => Ok(default),
        [x] => Ok(*x),
        _ => Err(Error::Config(format!("{flag} takes a single value here"))),
    }
}

fn train_config(common: &Common) -> Result<Config> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn load_sets(cfg: &Config, common: &Common, data: &DataArgs) -> Result<(Dataset, Dataset)> {
    let (_, array) = single_arch(cfg, &common.arch)?;
    match (&data.dataset, &data.validation) {
        (Some(t), Some(v)) => Ok((load_dataset(t)?, load_dataset(v)?)),
        (Some(t), None) => Ok((load_dataset(t)?, datasets(cfg, &array)?.1)),
        (None, Some(v)) => Ok((datasets(cfg, &array)?.0, load_dataset(v)?)),
        (None, None) => datasets(cfg, &array),
    }
}

fn median_ratio<T: Scalar>(cdae: &osa_doa::nn::Sequential<T>, val: &Dataset) -> Result<f64> {
    let mut r = denoising_ratios(cdae, val)?;
    r.sort_by(f64::total_cmp);
    Ok(r.get(r.len() / 2).copied().unwrap_or(f64::NAN))
}

fn fit_fc<T: Scalar>(cfg: &Config, cdae_path: &Path, train: &Dataset, val: &Dataset, out: &Path) -> Result<f64> {
    let cdae = load_checkpoint::<T>(cdae_path)?;
    if cdae.input_shape() != [2, train.k(), train.k()] {
        return Err(Error::Config(format!(
            "checkpoint {} expects input {:?}, dataset has K={}",
            cdae_path.display(),
            cdae.input_shape(),
            train.k()
        )));
    }
    let (fc, _) = train_fc_stage(cfg, &cdae, train, Some(val))?;
    let bce = validation_bce(&cdae, &fc, val)?;
    CdaeDnn::new(cdae, fc, train.grid())?.save(out)?;
    Ok(bce)
}

fn eval_metrics<T: Scalar>(m: &CdaeDnn<T>, ds: &Dataset) -> Result<String> {
    let bce = validation_bce(&m.cdae, &m.fc, ds)?;
    let ratio = median_ratio(&m.cdae, ds)?;
    let mut exact = 0usize;
    for s in &ds.samples {
        let p = m.decide(
            m.probabilities(&[s.noisy.to_covariance()])?.pop().expect("one input"),
            s.label.ones(),
        )?;
        if p.indices == s.label.active() {
            exact += 1;
        }
    }
    Ok(format!(
        "metric,value\nsamples,{}\nvalidation_bce,{bce}\nmedian_denoising_ratio,{ratio}\nexact_match_rate,{}\n",
        ds.len(),
        exact as f64 / ds.len().max(1) as f64
    ))
}

enum BenchKind {
    Snr,
    Snapshots,
    TwoSource,
}

fn bench(common: Common, sweep: SweepArgs, kind: BenchKind) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(s) = common.seed {
        cfg.bench.seed = s;
    }
    if !common.arch.is_empty() {
        cfg.bench.architectures = common.arch.clone();
    }
    if let Some(t) = sweep.trials {
        cfg.bench.trials = t;
    }
    if !sweep.estimators.is_empty() {
        cfg.bench.estimators = sweep.estimators.clone();
    }
    let default_truth = match kind {
        BenchKind::TwoSource => cfg.bench.two_source_truth_deg.clone(),
        _ => cfg.bench.truth_deg.clone(),
    };
    let truth = or_default(sweep.theta, default_truth);
    let s = match kind {
        BenchKind::Snapshots => Sweep::Snapshots {
            values: or_default(sweep.snapshots, cfg.bench.snapshots.clone()),
            snr_db: single(&sweep.snr, cfg.bench.snapshot_sweep_snr_db, "--snr")?,
        },
        _ => Sweep::Snr {
            values_db: or_default(sweep.snr, cfg.bench.snr_db.clone()),
            snapshots: single(&sweep.snapshots, cfg.sim.snapshots, "--snapshots")?,
        },
    };
    let mut scenario = Scenario::from_config(&cfg, s, truth)?;
    scenario.build_id = BUILD_ID.to_string();
    let base = cfg.array()?;
    let mut models = Vec::new();
    if scenario.estimators.contains(&EstimatorKind::CdaeDnn) {
        for path in &sweep.checkpoint {
            let data = std::fs::read(path)?;
            let k = peek_k(&data, base.grid(), cfg.train.precision)?;
            let array = scenario
                .architectures
                .iter()
                .map(|a| a.config(&base))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .find(|c| c.subarrays == k)
                .ok_or_else(|| Error::Config(format!("checkpoint {} (K={k}) matches no selected array", path.display())))?;
            models.push(TrainedModel::load(path, &array, cfg.train.precision)?);
        }
    }
    let table: ResultTable = match kind {
        BenchKind::Snr => run_rmse_vs_snr(&scenario, &models)?,
        BenchKind::Snapshots => run_rmse_vs_snapshots(&scenario, &models)?,
        BenchKind::TwoSource => run_two_source(&scenario, &models)?,
    };
    let mut buf = Vec::new();
    write_csv(&table, &mut buf)?;
    if let Some(out) = &common.out {
        std::fs::write(out, &buf)?;
        debug_assert_eq!(read_csv(out).ok().as_ref(), Some(&table));
    } else {
        std::io::stdout().write_all(&buf)?;
    }
    Ok(())
}

/// K of a saved model, read from the autoencoder's input shape.
fn peek_k(data: &[u8], grid: osa_doa::LabelGrid, precision: Precision) -> Result<usize> {
    let k = match precision {
        Precision::F32 => CdaeDnn::<f32>::from_bytes(data, grid)?.k(),
        Precision::F64 => CdaeDnn::<f64>::from_bytes(data, grid)?.k(),
    };
    Ok(k)
}

fn grad_check_command(cfg: &Config, array: &ArrayConfig, seed: u64, out: Option<&Path>) -> Result<()> {
    let k = array.subarrays;
    let l = array.grid().len();
    let mut rng = rng_from_seed(seed);
    let mut randn = |n: usize| -> Vec<f64> {
        use osa_doa::rng::complex_gaussian;
        (0..n).map(|_| complex_gaussian(&mut rng, 2.0).re).collect()
    };
    let batch = 3;
    let x = Tensor { shape: vec![batch, 2, k, k], data: randn(batch * 2 * k * k) };
    let cdae = build_cdae::<f64>(&cfg.cdae, k, seed)?;
    let t = Tensor { shape: x.shape.clone(), data: randn(batch * 2 * k * k) };
    let gc = GradCheckConfig { max_coords: Some(24), seed, ..GradCheckConfig::default() };
    let r1 = grad_check(&cdae, LossKind::Mse, &x, &t, &gc)?;
    let fc = build_fc::<f64>(&cfg.fc, k, l, seed)?;
    let mut z = vec![0.0; batch * l];
    for b in 0..batch {
        z[b * l + (b * 37) % l] = 1.0;
    }
    let r2 = grad_check(&fc, LossKind::Bce, &x, &Tensor { shape: vec![batch, l], data: z }, &gc)?;
    let mut text = String::from("model,tensor,checked,max_rel_err,max_abs_err\n");
    for (name, r) in [("cdae", &r1), ("fc", &r2)] {
        for t in &r.tensors {
            text.push_str(&format!("{name},{},{},{:e},{:e}\n", t.name, t.checked, t.max_rel_err, t.max_abs_err));
        }
    }
    emit(out, text.as_bytes())?;
    let worst = r1.max_rel_err().max(r2.max_rel_err());
    if worst >= 1e-4 {
        return Err(Error::Numerical(format!("gradient check failed: max relative error {worst:e}")));
    }
    Ok(())
}
