//! Monte-Carlo RMSE harness.
//!
//! Trial `t` at sweep point `i` draws its snapshots from
//! `derive_seed(seed, TRIAL, i·2³² + t)`. The overlapped and non-overlapped
//! arrays see the same seeds, so their comparison uses common random
//! numbers. Trials run on the rayon pool; results are collected in trial
//! order, which keeps every output independent of the thread count.
//!
//! Errors pair estimates and truths after sorting both. A trial's error is
//! the mean over sources of the squared difference in degrees; the RMSE is
//! the square root of its mean over successful trials. Failed trials are
//! counted and left out.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array_model::{build_beamformer, ArrayConfig, BeamformerMatrix, PhasePolicy};
use crate::cdae_dnn::{CdaeDnn, Prediction};
use crate::config::{Config, Precision};
use crate::crlb::{crlb, fisher_matrix};
use crate::error::{domain, Error, Result};
use crate::music::{music_estimate, MusicConfig};
use crate::rng::{derive_seed, stream};
use crate::signal_sim::{sample_covariance, simulate_snapshots, SimParams};
use crate::CMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    CdaeDnn,
    Music,
    MusicWhitened,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::CdaeDnn, EstimatorKind::Music, EstimatorKind::MusicWhitened];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::CdaeDnn => "cdae_dnn",
            EstimatorKind::Music => "music",
            EstimatorKind::MusicWhitened => "music_whitened",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator {s:?} (cdae_dnn, music, music_whitened)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Osa,
    Nosa,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Osa => "osa",
            Architecture::Nosa => "nosa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "osa" => Ok(Architecture::Osa),
            "nosa" => Ok(Architecture::Nosa),
            other => Err(Error::Config(format!("unknown architecture {other:?} (osa, nosa)"))),
        }
    }

    /// The geometry for this partition: the overlapped `base` itself, or
    /// the non-overlapped array with the same M and M_s.
    pub fn config(self, base: &ArrayConfig) -> Result<ArrayConfig> {
        match self {
            Architecture::Osa => Ok(*base),
            Architecture::Nosa => base.to_nosa(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sweep {
    Snr { values_db: Vec<f64>, snapshots: usize },
    Snapshots { values: Vec<usize>, snr_db: f64 },
}

impl Sweep {
    /// CSV column name of the swept variable.
    pub fn var_name(&self) -> &'static str {
        match self {
            Sweep::Snr { .. } => "snr_db",
            Sweep::Snapshots { .. } => "snapshots",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sweep::Snr { values_db, .. } => values_db.len(),
            Sweep::Snapshots { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (value as written, SNR in dB, N) of point `i`.
    fn point(&self, i: usize) -> (f64, f64, usize) {
        match self {
            Sweep::Snr { values_db, snapshots } => (values_db[i], values_db[i], *snapshots),
            Sweep::Snapshots { values, snr_db } => (values[i] as f64, *snr_db, values[i]),
        }
    }
}

/// One benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// The overlapped geometry; the non-overlapped one is derived from it.
    pub cfg: ArrayConfig,
    pub estimators: Vec<EstimatorKind>,
    pub architectures: Vec<Architecture>,
    pub sweep: Sweep,
    pub trials: usize,
    /// True angles in degrees; may be off the grid.
    pub truth: Vec<f64>,
    pub seed: u64,
    pub phase_policy: PhasePolicy,
    pub w_seed: u64,
    /// One combiner from `w_seed` for all trials, or a fresh one per trial.
    pub fixed_w: bool,
    pub noise_power: f64,
    pub with_crlb: bool,
    pub precision: Precision,
    /// Recorded in the output metadata.
    pub build_id: String,
    pub config_hash: String,
}

impl Scenario {
    /// A scenario from the `[bench]`, `[sim]` and `[array]` sections. The
    /// sweep still has to be chosen.
    pub fn from_config(cfg: &Config, sweep: Sweep, truth: Vec<f64>) -> Result<Self> {
        Ok(Scenario {
            cfg: cfg.array()?,
            estimators: cfg.bench.estimators.iter().map(|s| EstimatorKind::parse(s)).collect::<Result<_>>()?,
            architectures: cfg.bench.architectures.iter().map(|s| Architecture::parse(s)).collect::<Result<_>>()?,
            sweep,
            trials: cfg.bench.trials,
            truth,
            seed: cfg.bench.seed,
            phase_policy: cfg.sim.phase_policy.clone(),
            w_seed: cfg.sim.w_seed,
            fixed_w: cfg.sim.fixed_w,
            noise_power: cfg.sim.noise_power,
            with_crlb: cfg.bench.crlb,
            precision: cfg.train.precision,
            build_id: "unknown".into(),
            config_hash: cfg.hash(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() {
            return domain("benchmark sweep is empty");
        }
        if self.trials == 0 {
            return domain("benchmark needs at least one trial");
        }
        if self.estimators.is_empty() || self.architectures.is_empty() {
            return domain("benchmark needs at least one estimator and one architecture");
        }
        if self.truth.is_empty() {
            return domain("benchmark needs at least one true angle");
        }
        if let Sweep::Snapshots { values, .. } = &self.sweep {
            if values.contains(&0) {
                return domain("snapshot counts must be at least 1");
            }
        }
        if self.estimators.contains(&EstimatorKind::CdaeDnn) && !self.fixed_w {
            return domain("cdae_dnn is trained for one combiner and needs fixed_w = true");
        }
        for arch in &self.architectures {
            let cfg = arch.config(&self.cfg)?;
            if self.truth.len() >= cfg.subarrays {
                return domain(format!("{} sources need more than {} RF chains", self.truth.len(), cfg.subarrays));
            }
        }
        Ok(())
    }
}

/// A trained estimator in either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    F32(CdaeDnn<f32>),
    F64(CdaeDnn<f64>),
}

impl TrainedModel {
    pub fn k(&self) -> usize {
        match self {
            TrainedModel::F32(m) => m.k(),
            TrainedModel::F64(m) => m.k(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            TrainedModel::F32(_) => Precision::F32,
            TrainedModel::F64(_) => Precision::F64,
        }
    }

    pub fn predict_batch(&self, covariances: &[CMatrix], q: usize) -> Result<Vec<Prediction>> {
        match self {
            TrainedModel::F32(m) => m.predict_batch(covariances, q),
            TrainedModel::F64(m) => m.predict_batch(covariances, q),
        }
    }

    pub fn load(path: &Path, cfg: &ArrayConfig, precision: Precision) -> Result<Self> {
        let data = std::fs::read(path)?;
        let model = match precision {
            Precision::F32 => TrainedModel::F32(CdaeDnn::from_bytes(&data, cfg.grid())?),
            Precision::F64 => TrainedModel::F64(CdaeDnn::from_bytes(&data, cfg.grid())?),
        };
        if model.k() != cfg.subarrays {
            return Err(Error::Config(format!(
                "checkpoint {} is for K={}, array has K={}",
                path.display(),
                model.k(),
                cfg.subarrays
            )));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub estimator: String,
    pub architecture: String,
    pub rmse_deg: f64,
    pub trials: usize,
    pub failures: usize,
    pub crlb_deg: Option<f64>,
    pub seed: u64,
}

/// Reproduction metadata written as `# key=value` lines above the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub build_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub w_policy: String,
    pub precision: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub sweep_var: String,
    pub metadata: Metadata,
    pub with_crlb: bool,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn row(&self, sweep_value: f64, estimator: EstimatorKind, arch: Architecture) -> Option<&ResultRow> {
        self.rows.iter().find(|r| {
            r.sweep_value == sweep_value && r.estimator == estimator.name() && r.architecture == arch.name()
        })
    }
}

/// Distance of `theta` to the nearest grid angle.
pub fn grid_offset(theta: f64, cfg: &ArrayConfig) -> f64 {
    let grid = cfg.grid();
    (theta - grid.angle(grid.nearest(theta))).abs()
}

/// Mean over sources of the squared error after sorting both lists.
pub fn paired_squared_error(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() || truth.is_empty() {
        return domain(format!("{} estimates for {} sources", estimates.len(), truth.len()));
    }
    let mut e = estimates.to_vec();
    let mut t = truth.to_vec();
    e.sort_by(f64::total_cmp);
    t.sort_by(f64::total_cmp);
    Ok(e.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64)
}

fn trial_index(point: usize, trial: usize) -> u64 {
    ((point as u64) << 32) | trial as u64
}

fn beamformer(s: &Scenario, cfg: &ArrayConfig, trial_seed: Option<u64>) -> Result<BeamformerMatrix> {
    match (s.fixed_w, trial_seed) {
        (false, Some(seed)) => build_beamformer(cfg, &s.phase_policy, derive_seed(seed, stream::BEAMFORMER, 0)),
        _ => build_beamformer(cfg, &s.phase_policy, s.w_seed),
    }
}

/// Runs every (sweep point, architecture, estimator) cell.
pub fn run_benchmark(s: &Scenario, models: &[TrainedModel]) -> Result<ResultTable> {
    s.validate()?;
    let q = s.truth.len();
    let mut rows = Vec::new();
    let arch_cfgs: Vec<(Architecture, ArrayConfig, Option<&TrainedModel>)> = s
        .architectures
        .iter()
        .map(|&a| {
            let cfg = a.config(&s.cfg)?;
            let model = models.iter().find(|m| m.k() == cfg.subarrays);
            if s.estimators.contains(&EstimatorKind::CdaeDnn) && model.is_none() {
                return Err(Error::Config(format!(
                    "cdae_dnn needs a checkpoint for the {} array (K={})",
                    a.name(),
                    cfg.subarrays
                )));
            }
            Ok((a, cfg, model))
        })
        .collect::<Result<_>>()?;
    let floor = {
        let d: Vec<f64> = s.truth.iter().map(|&t| grid_offset(t, &s.cfg)).collect();
        (d.iter().map(|v| v * v).sum::<f64>() / q as f64).sqrt()
    };

    for i in 0..s.sweep.len() {
        let (value, snr_db, snapshots) = s.sweep.point(i);
        for (arch, cfg, model) in &arch_cfgs {
            let fixed_w = beamformer(s, cfg, None)?;
            let covs: Vec<Result<(CMatrix, BeamformerMatrix)>> = (0..s.trials)
                .into_par_iter()
                .map(|t| {
                    let seed = derive_seed(s.seed, stream::TRIAL, trial_index(i, t));
                    let w = if s.fixed_w { fixed_w.clone() } else { beamformer(s, cfg, Some(seed))? };
                    let params = SimParams::with_noise_power(snr_db, s.noise_power, snapshots, &s.truth, seed)?;
                    let c = sample_covariance(&simulate_snapshots(cfg, &w, &params)?)?.matrix;
                    Ok((c, w))
                })
                .collect();
            let crlb_deg = if s.with_crlb {
                let s2 = s.noise_power * 10f64.powf(snr_db / 10.0);
                fisher_matrix(cfg, &fixed_w, &s.truth, s2, s.noise_power)
                    .and_then(|f| crlb(&f, snapshots))
                    .map(|r| r.rmse_bound_deg())
                    .ok()
            } else {
                None
            };
            for &est in &s.estimators {
                let errors: Vec<Option<f64>> = match est {
                    EstimatorKind::Music | EstimatorKind::MusicWhitened => {
                        let mcfg = MusicConfig::new(cfg.grid(), q, est == EstimatorKind::MusicWhitened);
                        covs.par_iter()
                            .map(|r| {
                                let (c, w) = r.as_ref().ok()?;
                                let e = music_estimate(c, w, cfg, &mcfg).ok()?;
                                paired_squared_error(&e, &s.truth).ok()
                            })
                            .collect()
                    }
                    EstimatorKind::CdaeDnn => {
                        let model = model.expect("checked above");
                        let ok: Vec<CMatrix> = covs.iter().filter_map(|r| r.as_ref().ok().map(|(c, _)| c.clone())).collect();
                        let mut preds = model.predict_batch(&ok, q)?.into_iter();
                        covs.iter()
                            .map(|r| {
                                r.as_ref().ok()?;
                                let p = preds.next()?;
                                paired_squared_error(&p.angles, &s.truth).ok()
                            })
                            .collect()
                    }
                };
                let good: Vec<f64> = errors.iter().flatten().copied().collect();
                let failures = errors.len() - good.len();
                let rmse = if good.is_empty() {
                    f64::NAN
                } else {
                    (good.iter().sum::<f64>() / good.len() as f64).sqrt()
                };
                if rmse < floor * (1.0 - 1e-9) {
                    return Err(Error::Numerical(format!(
                        "{} RMSE {rmse} below the grid floor {floor}",
                        est.name()
                    )));
                }
                rows.push(ResultRow {
                    sweep_value: value,
                    estimator: est.name().into(),
                    architecture: arch.name().into(),
                    rmse_deg: rmse,
                    trials: s.trials,
                    failures,
                    crlb_deg,
                    seed: s.seed,
                });
            }
        }
    }
    Ok(ResultTable {
        sweep_var: s.sweep.var_name().into(),
        metadata: Metadata {
            build_id: s.build_id.clone(),
            config_hash: s.config_hash.clone(),
            seed: s.seed,
            w_policy: format!("{}{}", s.phase_policy.name(), if s.fixed_w { ",fixed" } else { ",per_trial" }),
            precision: s.precision.name().into(),
        },
        with_crlb: s.with_crlb,
        rows,
    })
}

/// RMSE against SNR.
pub fn run_rmse_vs_snr(s: &Scenario, models: &[TrainedModel]) -> Result<ResultTable> {
    if !matches!(s.sweep, Sweep::Snr { .. }) {
        return domain("expected an SNR sweep");
    }
    run_benchmark(s, models)
}

/// RMSE against the number of snapshots.
pub fn run_rmse_vs_snapshots(s: &Scenario, models: &[TrainedModel]) -> Result<ResultTable> {
    if !matches!(s.sweep, Sweep::Snapshots { .. }) {
        return domain("expected a snapshot sweep");
    }
    run_benchmark(s, models)
}

/// RMSE against SNR for two sources.
pub fn run_two_source(s: &Scenario, models: &[TrainedModel]) -> Result<ResultTable> {
    if s.truth.len() != 2 {
        return domain(format!("two-source run with {} true angles", s.truth.len()));
    }
    run_rmse_vs_snr(s, models)
}

const META_KEYS: [&str; 5] = ["build_id", "config_hash", "seed", "w_policy", "precision"];

/// Writes metadata comment lines, the header and one row per cell.
pub fn write_csv<W: Write>(table: &ResultTable, out: W) -> Result<()> {
    let mut out = out;
    let m = &table.metadata;
    for (k, v) in META_KEYS.iter().zip([&m.build_id, &m.config_hash, &m.seed.to_string(), &m.w_policy, &m.precision]) {
        writeln!(out, "# {k}={v}")?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec![table.sweep_var.as_str(), "estimator", "architecture", "rmse_deg", "trials", "failures"];
    if table.with_crlb {
        header.push("crlb_deg");
    }
    header.push("seed");
    w.write_record(&header).map_err(csv_err)?;
    for r in &table.rows {
        let mut rec = vec![
            r.sweep_value.to_string(),
            r.estimator.clone(),
            r.architecture.clone(),
            r.rmse_deg.to_string(),
            r.trials.to_string(),
            r.failures.to_string(),
        ];
        if table.with_crlb {
            rec.push(r.crlb_deg.map(|v| v.to_string()).unwrap_or_default());
        }
        rec.push(r.seed.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn emit_csv(table: &ResultTable, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(table, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn parse_csv<R: Read>(input: R) -> Result<ResultTable> {
    let mut text = String::new();
    let mut input = input;
    input.read_to_string(&mut text)?;
    let mut meta = std::collections::HashMap::new();
    let mut body = String::new();
    for line in text.lines() {
        match line.strip_prefix("# ") {
            Some(kv) => {
                let (k, v) = kv.split_once('=').ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            }
            None => {
                body.push_str(line);
                body.push('\n');
            }
        }
    }
    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Format(format!("missing metadata {k}")));
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
    let int = |s: &str| s.parse::<u64>().map_err(|_| Error::Format(format!("bad integer {s:?}")));
    let metadata = Metadata {
        build_id: get("build_id")?,
        config_hash: get("config_hash")?,
        seed: int(&get("seed")?)?,
        w_policy: get("w_policy")?,
        precision: get("precision")?,
    };
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let header = reader.headers().map_err(csv_err)?.clone();
    let with_crlb = header.iter().any(|h| h == "crlb_deg");
    let width = if with_crlb { 8 } else { 7 };
    if header.len() != width {
        return Err(Error::Format(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let crlb_deg = if with_crlb && !rec[6].is_empty() { Some(num(&rec[6])?) } else { None };
        rows.push(ResultRow {
            sweep_value: num(&rec[0])?,
            estimator: rec[1].to_string(),
            architecture: rec[2].to_string(),
            rmse_deg: num(&rec[3])?,
            trials: int(&rec[4])? as usize,
            failures: int(&rec[5])? as usize,
            crlb_deg,
            seed: int(&rec[width - 1])?,
        });
    }
    Ok(ResultTable { sweep_var: header[0].to_string(), metadata, with_crlb, rows })
}

pub fn read_csv(path: &Path) -> Result<ResultTable> {
    parse_csv(std::fs::File::open(path)?)
}
