//! Network features, grid labels and the binary dataset format.
//!
//! A covariance C becomes a `2×K×K` real tensor (channel 0 = Re C, channel
//! 1 = Im C, channel-major) divided by the average diagonal power
//! `trace(C)/K`. The clean target of a sample is normalised with the noisy
//! input's factor so both live on the same scale.
//!
//! # File layout (`.osad`, little-endian)
//!
//! ```text
//! "OSAD" | u16 version | u16 K | u32 L | u64 count | u8 payload (0=f64, 1=f32)
//! u32 manifest_len | manifest (JSON, UTF-8)
//! count × record:
//!     noisy: f64 norm_factor, 2K² values
//!     clean: f64 norm_factor, 2K² values
//!     label: ceil(L/8) bytes, bit l = byte l/8, bit l%8 (LSB first)
//!     meta:  u8 Q, Q × f64 theta, f64 snr_db, u32 N, u64 seed, u64 w_seed
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! The manifest is also written next to the file as `<path>.manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array_model::{build_beamformer, ArrayConfig, BeamformerMatrix, PhasePolicy};
use crate::codec::{check_magic, verify_crc, Reader, Writer};
use crate::error::{domain, shape, Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::signal_sim::{exact_covariance, sample_covariance, simulate_snapshots, SimParams};
use crate::{CMatrix, C64};

pub const DATASET_MAGIC: &[u8; 4] = b"OSAD";
pub const DATASET_VERSION: u16 = 1;

/// Real `2×K×K` network input built from a K×K covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub k: usize,
    /// Channel-major: `data[c*K*K + i*K + j]`.
    pub data: Vec<f64>,
    pub norm_factor: f64,
}

impl FeatureTensor {
    pub fn get(&self, channel: usize, i: usize, j: usize) -> f64 {
        self.data[channel * self.k * self.k + i * self.k + j]
    }

    /// Undoes the normalisation and re-assembles the complex matrix.
    pub fn to_covariance(&self) -> CMatrix {
        let k = self.k;
        CMatrix::from_fn(k, k, |i, j| {
            C64::new(self.get(0, i, j), self.get(1, i, j)) * self.norm_factor
        })
    }

    pub fn from_parts(k: usize, data: Vec<f64>, norm_factor: f64) -> Result<Self> {
        if data.len() != 2 * k * k {
            return shape(format!("feature data has {} values, need {}", data.len(), 2 * k * k));
        }
        Ok(FeatureTensor { k, data, norm_factor })
    }
}

/// Splits `c` into real/imaginary channels divided by `norm_factor`
/// (default `trace(C)/K`).
pub fn to_feature_tensor(c: &CMatrix, norm_factor: Option<f64>) -> Result<FeatureTensor> {
    if !c.is_square() {
        return shape(format!("covariance is {}x{}", c.nrows(), c.ncols()));
    }
    if c.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return domain("covariance has non-finite entries");
    }
    let k = c.nrows();
    let nf = match norm_factor {
        Some(v) => v,
        None => c.diagonal().iter().map(|z| z.re).sum::<f64>() / k as f64,
    };
    if !(nf.is_finite() && nf > 0.0) {
        return domain(format!("normalisation factor {nf} is not positive"));
    }
    let mut data = vec![0.0; 2 * k * k];
    for i in 0..k {
        for j in 0..k {
            data[i * k + j] = c[(i, j)].re / nf;
            data[k * k + i * k + j] = c[(i, j)].im / nf;
        }
    }
    Ok(FeatureTensor { k, data, norm_factor: nf })
}

/// Uniform angle grid over [-θ0, θ0] with step Δθ; L = 2θ0/Δθ + 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub half_width_deg: f64,
    pub step_deg: f64,
}

const GRID_TOL: f64 = 1e-9;

impl LabelGrid {
    pub fn new(half_width_deg: f64, step_deg: f64) -> Result<Self> {
        if !(half_width_deg > 0.0 && half_width_deg <= 90.0 && step_deg > 0.0) {
            return domain(format!("invalid grid ±{half_width_deg}° step {step_deg}°"));
        }
        let cells = 2.0 * half_width_deg / step_deg;
        if (cells - cells.round()).abs() > GRID_TOL * cells.max(1.0) {
            return domain(format!("2·{half_width_deg}/{step_deg} is not an integer"));
        }
        Ok(LabelGrid { half_width_deg, step_deg })
    }

    /// L.
    pub fn len(&self) -> usize {
        (2.0 * self.half_width_deg / self.step_deg).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn angle(&self, index: usize) -> f64 {
        -self.half_width_deg + index as f64 * self.step_deg
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.angle(i)).collect()
    }

    /// Index of an on-grid angle, `None` when θ is off-grid or outside.
    pub fn index_of(&self, theta_deg: f64) -> Option<usize> {
        let pos = (theta_deg + self.half_width_deg) / self.step_deg;
        let r = pos.round();
        if (pos - r).abs() > GRID_TOL || r < 0.0 || r as usize >= self.len() {
            None
        } else {
            Some(r as usize)
        }
    }

    /// Nearest grid index, clamped to the grid. Halfway points round away
    /// from zero offset (towards the higher index).
    pub fn nearest(&self, theta_deg: f64) -> usize {
        let pos = ((theta_deg + self.half_width_deg) / self.step_deg).round();
        pos.clamp(0.0, (self.len() - 1) as f64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Every angle must sit on the grid.
    Training,
    /// Off-grid angles snap to the nearest grid point and set `off_grid`.
    Evaluation,
}

/// Binary multi-label target with one 1 per source.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    pub z: Vec<u8>,
    pub grid: LabelGrid,
    pub off_grid: bool,
}

impl LabelVector {
    pub fn ones(&self) -> usize {
        self.z.iter().filter(|&&b| b == 1).count()
    }

    pub fn active(&self) -> Vec<usize> {
        self.z.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i).collect()
    }
}

pub fn make_label(thetas: &[f64], grid: &LabelGrid, mode: LabelMode) -> Result<LabelVector> {
    let mut z = vec![0u8; grid.len()];
    let mut off_grid = false;
    for &t in thetas {
        if !t.is_finite() || t.abs() > grid.half_width_deg + GRID_TOL {
            return domain(format!("angle {t}° outside ±{}°", grid.half_width_deg));
        }
        let idx = match (grid.index_of(t), mode) {
            (Some(i), _) => i,
            (None, LabelMode::Training) => {
                return domain(format!("training angle {t}° is not on the {}° grid", grid.step_deg))
            }
            (None, LabelMode::Evaluation) => {
                off_grid = true;
                grid.nearest(t)
            }
        };
        if z[idx] == 1 {
            return domain(format!("two sources map to grid angle {}°", grid.angle(idx)));
        }
        z[idx] = 1;
    }
    Ok(LabelVector { z, grid: *grid, off_grid })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub thetas: Vec<f64>,
    pub snr_db: f64,
    pub snapshots: usize,
    /// Seed of the snapshot stream.
    pub seed: u64,
    pub w_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// From the sample covariance C̃.
    pub noisy: FeatureTensor,
    /// From the exact covariance C, normalised with `noisy.norm_factor`.
    pub clean: FeatureTensor,
    pub label: LabelVector,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrSpec {
    /// Every grid angle is simulated at each listed SNR.
    Levels(Vec<f64>),
    /// One SNR drawn uniformly per sample.
    Uniform { min_db: f64, max_db: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WMode {
    /// One combiner for the whole dataset, drawn from `w_seed`.
    Fixed,
    /// A fresh combiner per sample.
    PerSample,
}

/// What to generate. Q=1 samples cover every grid angle `reps` times per SNR
/// level; Q=2 samples are random on-grid pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub snr: SnrSpec,
    pub snapshots: usize,
    pub reps: usize,
    /// Q=2 samples per SNR level (total for `Uniform`).
    pub pairs_per_level: usize,
    pub min_separation_deg: f64,
    pub w_mode: WMode,
    pub phase_policy: PhasePolicy,
    pub w_seed: u64,
    pub master_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            snr: SnrSpec::Uniform { min_db: -20.0, max_db: 10.0 },
            snapshots: 100,
            reps: 2,
            pairs_per_level: 0,
            min_separation_deg: 2.0,
            w_mode: WMode::Fixed,
            phase_policy: PhasePolicy::RandomUniform,
            w_seed: 1,
            master_seed: 0,
        }
    }
}

impl DatasetSpec {
    fn levels(&self) -> usize {
        match &self.snr {
            SnrSpec::Levels(v) => v.len(),
            SnrSpec::Uniform { .. } => 1,
        }
    }

    pub fn single_source_count(&self, grid: &LabelGrid) -> usize {
        self.levels() * grid.len() * self.reps
    }

    pub fn pair_count(&self) -> usize {
        self.levels() * self.pairs_per_level
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn validate(&self, cfg: &ArrayConfig) -> Result<()> {
        if self.snapshots == 0 {
            return domain("dataset needs N >= 1");
        }
        match &self.snr {
            SnrSpec::Levels(v) if v.iter().any(|s| !s.is_finite()) => {
                return domain("SNR levels must be finite")
            }
            SnrSpec::Uniform { min_db, max_db } if !(min_db <= max_db) => {
                return domain("empty SNR range")
            }
            _ => {}
        }
        if let PhasePolicy::UserSupplied(_) = self.phase_policy {
            if self.w_mode == WMode::PerSample {
                return domain("user-supplied phases cannot be redrawn per sample");
            }
        }
        if self.pairs_per_level > 0 {
            if cfg.subarrays <= 2 {
                return domain(format!("two sources need more than {} RF chains", cfg.subarrays));
            }
            let grid = cfg.grid();
            let span = grid.step_deg * (grid.len() - 1) as f64;
            if !(self.min_separation_deg >= 0.0) || self.min_separation_deg > span {
                return domain(format!(
                    "separation {}° infeasible on a {span}° grid",
                    self.min_separation_deg
                ));
            }
            if self.min_separation_deg < grid.step_deg {
                return domain("two-source separation must be at least one grid step");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub array: ArrayConfig,
    pub spec: DatasetSpec,
    pub sample_count: usize,
    pub single_source: usize,
    pub two_source: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn k(&self) -> usize {
        self.manifest.array.subarrays
    }

    pub fn grid(&self) -> LabelGrid {
        self.manifest.array.grid()
    }

    /// The combiner shared by all samples (fixed-W datasets only).
    pub fn fixed_beamformer(&self) -> Result<BeamformerMatrix> {
        if self.manifest.spec.w_mode != WMode::Fixed {
            return domain("dataset was generated with a per-sample combiner");
        }
        build_beamformer(&self.manifest.array, &self.manifest.spec.phase_policy, self.manifest.spec.w_seed)
    }

    /// Keeps only samples with `q` sources.
    pub fn filter_sources(&self, q: usize) -> Dataset {
        let samples: Vec<Sample> =
            self.samples.iter().filter(|s| s.meta.thetas.len() == q).cloned().collect();
        let mut manifest = self.manifest.clone();
        manifest.sample_count = samples.len();
        manifest.single_source = if q == 1 { samples.len() } else { 0 };
        manifest.two_source = if q == 2 { samples.len() } else { 0 };
        Dataset { samples, manifest }
    }
}

struct Plan {
    thetas: Vec<f64>,
    snr_db: f64,
}

fn plan_samples(spec: &DatasetSpec, grid: &LabelGrid) -> Vec<Plan> {
    let levels: Vec<Option<f64>> = match &spec.snr {
        SnrSpec::Levels(v) => v.iter().copied().map(Some).collect(),
        SnrSpec::Uniform { .. } => vec![None],
    };
    let draw_snr = |rng: &mut crate::rng::SimRng, level: Option<f64>| match (level, &spec.snr) {
        (Some(s), _) => s,
        (None, SnrSpec::Uniform { min_db, max_db }) => {
            min_db + (max_db - min_db) * rng.random::<f64>()
        }
        (None, SnrSpec::Levels(_)) => unreachable!(),
    };
    let mut plans = Vec::new();
    for &level in &levels {
        for idx in 0..grid.len() {
            for _ in 0..spec.reps {
                let mut rng = rng_from_seed(derive_seed(spec.master_seed, stream::PAIRS, plans.len() as u64));
                plans.push(Plan { thetas: vec![grid.angle(idx)], snr_db: draw_snr(&mut rng, level) });
            }
        }
    }
    let min_cells = (spec.min_separation_deg / grid.step_deg - GRID_TOL).ceil() as usize;
    for &level in &levels {
        for _ in 0..spec.pairs_per_level {
            let mut rng = rng_from_seed(derive_seed(spec.master_seed, stream::PAIRS, plans.len() as u64));
            let snr_db = draw_snr(&mut rng, level);
            let (a, b) = loop {
                let a = rng.random_range(0..grid.len());
                let b = rng.random_range(0..grid.len());
                if a.abs_diff(b) >= min_cells.max(1) {
                    break (a.min(b), a.max(b));
                }
            };
            plans.push(Plan { thetas: vec![grid.angle(a), grid.angle(b)], snr_db });
        }
    }
    plans
}

/// Simulates one training pair from a sample covariance and the matching
/// exact covariance.
pub fn make_sample(
    cfg: &ArrayConfig,
    w: &BeamformerMatrix,
    params: &SimParams,
    mode: LabelMode,
) -> Result<Sample> {
    let noisy_c = sample_covariance(&simulate_snapshots(cfg, w, params)?)?;
    let clean_c = exact_covariance(cfg, w, &params.thetas, params.signal_power, params.noise_power)?;
    let noisy = to_feature_tensor(&noisy_c.matrix, None)?;
    let clean = to_feature_tensor(&clean_c.matrix, Some(noisy.norm_factor))?;
    Ok(Sample {
        noisy,
        clean,
        label: make_label(&params.thetas, &cfg.grid(), mode)?,
        meta: SampleMeta {
            thetas: params.thetas.clone(),
            snr_db: params.snr_db,
            snapshots: params.snapshots,
            seed: params.seed,
            w_seed: w.seed,
        },
    })
}

pub fn generate_dataset(spec: &DatasetSpec, cfg: &ArrayConfig) -> Result<Dataset> {
    cfg.validate()?;
    spec.validate(cfg)?;
    let grid = cfg.grid();
    let plans = plan_samples(spec, &grid);
    let fixed = match spec.w_mode {
        WMode::Fixed => Some(build_beamformer(cfg, &spec.phase_policy, spec.w_seed)?),
        WMode::PerSample => None,
    };
    let samples = plans
        .par_iter()
        .enumerate()
        .map(|(i, plan)| {
            let own;
            let w = match &fixed {
                Some(w) => w,
                None => {
                    let seed = derive_seed(spec.master_seed, stream::BEAMFORMER, i as u64);
                    own = build_beamformer(cfg, &spec.phase_policy, seed)?;
                    &own
                }
            };
            let seed = derive_seed(spec.master_seed, stream::SAMPLE, i as u64);
            let params = SimParams::new(plan.snr_db, spec.snapshots, &plan.thetas, seed)?;
            make_sample(cfg, w, &params, LabelMode::Training)
        })
        .collect::<Result<Vec<_>>>()?;
    let single = samples.iter().filter(|s| s.meta.thetas.len() == 1).count();
    Ok(Dataset {
        manifest: Manifest {
            format_version: DATASET_VERSION,
            array: *cfg,
            spec: spec.clone(),
            sample_count: samples.len(),
            single_source: single,
            two_source: samples.len() - single,
        },
        samples,
    })
}

/// Payload precision of a dataset file. `F64` round-trips bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    F64,
    F32,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn encode_dataset(ds: &Dataset, payload: Payload) -> Result<Vec<u8>> {
    let k = ds.k();
    let l = ds.grid().len();
    let manifest = serde_json::to_vec_pretty(&ds.manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.u16(u16::try_from(k).map_err(|_| Error::Format("K too large".into()))?);
    w.u32(l as u32);
    w.u64(ds.samples.len() as u64);
    w.u8(matches!(payload, Payload::F32) as u8);
    w.u32(manifest.len() as u32);
    w.bytes(&manifest);
    let put_tensor = |w: &mut Writer, t: &FeatureTensor| -> Result<()> {
        if t.k != k {
            return shape(format!("sample tensor K={} in a K={k} dataset", t.k));
        }
        w.f64(t.norm_factor);
        for &v in &t.data {
            match payload {
                Payload::F64 => w.f64(v),
                Payload::F32 => w.f32(v as f32),
            }
        }
        Ok(())
    };
    for s in &ds.samples {
        put_tensor(&mut w, &s.noisy)?;
        put_tensor(&mut w, &s.clean)?;
        if s.label.z.len() != l {
            return shape("label length differs from grid");
        }
        let mut packed = vec![0u8; l.div_ceil(8)];
        for (i, &b) in s.label.z.iter().enumerate() {
            packed[i / 8] |= (b & 1) << (i % 8);
        }
        w.bytes(&packed);
        let q = u8::try_from(s.meta.thetas.len()).map_err(|_| Error::Format("too many sources".into()))?;
        w.u8(q);
        for &t in &s.meta.thetas {
            w.f64(t);
        }
        w.f64(s.meta.snr_db);
        w.u32(s.meta.snapshots as u32);
        w.u64(s.meta.seed);
        w.u64(s.meta.w_seed);
    }
    Ok(w.seal())
}

pub fn decode_dataset(data: &[u8]) -> Result<Dataset> {
    check_magic(data, DATASET_MAGIC)?;
    let mut head = Reader::new(&data[4..]);
    let version = head.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset version {version}, expected {DATASET_VERSION}")));
    }
    let body = verify_crc(data)?;
    let mut r = Reader::new(&body[6..]);
    let k = r.u16()? as usize;
    let l = r.u32()? as usize;
    let count = r.u64()? as usize;
    let payload = match r.u8()? {
        0 => Payload::F64,
        1 => Payload::F32,
        other => return Err(Error::Format(format!("unknown payload flag {other}"))),
    };
    let mlen = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let grid = manifest.array.grid();
    if manifest.array.subarrays != k || grid.len() != l || manifest.sample_count != count {
        return Err(Error::Format("header disagrees with manifest".into()));
    }
    let get_tensor = |r: &mut Reader| -> Result<FeatureTensor> {
        let norm_factor = r.f64()?;
        let data = (0..2 * k * k)
            .map(|_| match payload {
                Payload::F64 => r.f64(),
                Payload::F32 => r.f32().map(f64::from),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureTensor { k, data, norm_factor })
    };
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let noisy = get_tensor(&mut r)?;
        let clean = get_tensor(&mut r)?;
        let packed = r.take(l.div_ceil(8))?;
        let z: Vec<u8> = (0..l).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
        let q = r.u8()? as usize;
        let thetas = (0..q).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let snr_db = r.f64()?;
        let snapshots = r.u32()? as usize;
        let seed = r.u64()?;
        let w_seed = r.u64()?;
        let off_grid = thetas.iter().any(|&t| grid.index_of(t).is_none());
        samples.push(Sample {
            noisy,
            clean,
            label: LabelVector { z, grid, off_grid },
            meta: SampleMeta { thetas, snr_db, snapshots, seed, w_seed },
        });
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(Dataset { samples, manifest })
}

/// Writes the binary file and the JSON manifest sidecar.
pub fn save_dataset(ds: &Dataset, path: &Path, payload: Payload) -> Result<()> {
    fs::write(path, encode_dataset(ds, payload)?)?;
    let manifest = serde_json::to_string_pretty(&ds.manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    fs::write(manifest_path(path), manifest + "\n")?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
