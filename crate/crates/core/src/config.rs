//! Run configuration read from TOML. Every section and key is optional;
//! missing values take the scaled desk defaults. Unknown keys are errors.
//!
//! ```toml
//! [array]                  # M = K·M_s - (K-1)·ΔM_s, K is derived
//! elements = 32
//! subarray_size = 8
//! overlap = 4
//! spacing = 0.5            # d, same unit as wavelength
//! wavelength = 1.0
//! region_deg = 60.0        # angles and grid cover [-region, region]
//! grid_step_deg = 1.0
//!
//! [sim]
//! snapshots = 100
//! noise_power = 1.0
//! phase_policy = "random_uniform"   # or "all_zero"
//! w_seed = 1               # combiner seed shared by training and evaluation
//! fixed_w = true           # false: a fresh combiner per sample or trial
//!
//! [dataset]
//! snr_levels = [-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0]
//! reps = 3                 # samples per grid angle and SNR level
//! pairs_per_level = 0      # two-source samples per SNR level
//! min_separation_deg = 2.0
//! validation_reps = 1
//! seed = 0
//!
//! [cdae]
//! kernel = 3
//! channels = [8, 16, 16]
//! stride = 1
//! padding = 1
//!
//! [fc]
//! widths = [256, 256]
//! dropout = 0.2
//!
//! [train]
//! cdae_optimizer = "adam"  # or "sgd"
//! cdae_batch_size = 16
//! cdae_epochs = 400
//! cdae_decay_epochs = 60   # further epochs at lr / 10
//! cdae_lr = 0.002
//! fc_optimizer = "sgd"
//! fc_batch_size = 16
//! fc_epochs = 100
//! fc_decay_epochs = 0
//! fc_lr = 2.0
//! seed = 0
//! joint_finetune = false
//! precision = "f32"        # or "f64"
//!
//! [bench]
//! snr_db = [-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0]
//! snapshots = [10, 100, 500, 1000]
//! snapshot_sweep_snr_db = -13.0
//! trials = 200
//! truth_deg = [10.1]
//! two_source_truth_deg = [10.1, 20.1]
//! estimators = ["cdae_dnn", "music", "music_whitened"]
//! architectures = ["osa", "nosa"]
//! seed = 0
//! crlb = true
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array_model::{ArrayConfig, PhasePolicy};
use crate::cdae_dnn::{CdaeArch, FcArch, TrainHyper};
use crate::dataset::{DatasetSpec, SnrSpec, WMode};
use crate::error::{Error, Result};
use crate::nn::OptimizerKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArraySection {
    pub elements: usize,
    pub subarray_size: usize,
    pub overlap: usize,
    pub spacing: f64,
    pub wavelength: f64,
    pub region_deg: f64,
    pub grid_step_deg: f64,
}

impl Default for ArraySection {
    fn default() -> Self {
        ArraySection {
            elements: 32,
            subarray_size: 8,
            overlap: 4,
            spacing: 0.5,
            wavelength: 1.0,
            region_deg: 60.0,
            grid_step_deg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub snapshots: usize,
    pub noise_power: f64,
    pub phase_policy: PhasePolicy,
    pub w_seed: u64,
    pub fixed_w: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            snapshots: 100,
            noise_power: 1.0,
            phase_policy: PhasePolicy::RandomUniform,
            w_seed: 1,
            fixed_w: true,
        }
    }
}

fn snr_sweep() -> Vec<f64> {
    (0..7).map(|i| -20.0 + 5.0 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub snr_levels: Vec<f64>,
    pub reps: usize,
    pub pairs_per_level: usize,
    pub min_separation_deg: f64,
    pub validation_reps: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            snr_levels: snr_sweep(),
            reps: 3,
            pairs_per_level: 0,
            min_separation_deg: 2.0,
            validation_reps: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("precision must be f32 or f64, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub cdae_optimizer: OptimizerKind,
    pub cdae_batch_size: usize,
    pub cdae_epochs: usize,
    pub cdae_decay_epochs: usize,
    pub cdae_lr: f64,
    pub fc_optimizer: OptimizerKind,
    pub fc_batch_size: usize,
    pub fc_epochs: usize,
    pub fc_decay_epochs: usize,
    pub fc_lr: f64,
    pub seed: u64,
    pub joint_finetune: bool,
    pub precision: Precision,
}

impl Default for TrainSection {
    fn default() -> Self {
        let (c, f) = (TrainHyper::toy_cdae(), TrainHyper::toy_fc());
        TrainSection {
            cdae_optimizer: c.optimizer,
            cdae_batch_size: c.batch_size,
            cdae_epochs: c.epochs,
            cdae_decay_epochs: c.decay_epochs,
            cdae_lr: c.lr,
            fc_optimizer: f.optimizer,
            fc_batch_size: f.batch_size,
            fc_epochs: f.epochs,
            fc_decay_epochs: f.decay_epochs,
            fc_lr: f.lr,
            seed: 0,
            joint_finetune: false,
            precision: Precision::F32,
        }
    }
}

impl TrainSection {
    pub fn cdae_hyper(&self) -> TrainHyper {
        TrainHyper {
            batch_size: self.cdae_batch_size,
            epochs: self.cdae_epochs,
            lr: self.cdae_lr,
            decay_epochs: self.cdae_decay_epochs,
            optimizer: self.cdae_optimizer,
            seed: self.seed,
        }
    }

    pub fn fc_hyper(&self) -> TrainHyper {
        TrainHyper {
            batch_size: self.fc_batch_size,
            epochs: self.fc_epochs,
            lr: self.fc_lr,
            decay_epochs: self.fc_decay_epochs,
            optimizer: self.fc_optimizer,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub snr_db: Vec<f64>,
    pub snapshots: Vec<usize>,
    pub snapshot_sweep_snr_db: f64,
    pub trials: usize,
    pub truth_deg: Vec<f64>,
    pub two_source_truth_deg: Vec<f64>,
    pub estimators: Vec<String>,
    pub architectures: Vec<String>,
    pub seed: u64,
    pub crlb: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            snr_db: snr_sweep(),
            snapshots: vec![10, 100, 500, 1000],
            snapshot_sweep_snr_db: -13.0,
            trials: 200,
            truth_deg: vec![10.1],
            two_source_truth_deg: vec![10.1, 20.1],
            estimators: vec!["cdae_dnn".into(), "music".into(), "music_whitened".into()],
            architectures: vec!["osa".into(), "nosa".into()],
            seed: 0,
            crlb: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub array: ArraySection,
    pub sim: SimSection,
    pub dataset: DatasetSection,
    pub cdae: CdaeArch,
    pub fc: FcArch,
    pub train: TrainSection,
    pub bench: BenchSection,
}

impl Default for CdaeArch {
    fn default() -> Self {
        CdaeArch::toy()
    }
}

impl Default for FcArch {
    fn default() -> Self {
        FcArch::toy()
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.array()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The geometry described by `[array]`.
    pub fn array(&self) -> Result<ArrayConfig> {
        let a = &self.array;
        ArrayConfig::from_elements(a.elements, a.subarray_size, a.overlap)?
            .with_spacing(a.spacing, a.wavelength)?
            .with_region(a.region_deg, a.grid_step_deg)
            .map_err(|e| Error::Config(format!("[array]: {e}")))
    }

    pub fn dataset_spec(&self, validation: bool) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec {
            snr: SnrSpec::Levels(d.snr_levels.clone()),
            snapshots: self.sim.snapshots,
            reps: if validation { d.validation_reps } else { d.reps },
            pairs_per_level: d.pairs_per_level,
            min_separation_deg: d.min_separation_deg,
            w_mode: if self.sim.fixed_w { WMode::Fixed } else { WMode::PerSample },
            phase_policy: self.sim.phase_policy.clone(),
            w_seed: self.sim.w_seed,
            // validation draws from a disjoint stream
            master_seed: if validation { d.seed ^ 0x5641_4c49_4441_5445 } else { d.seed },
        }
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of [`Config::to_toml`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
