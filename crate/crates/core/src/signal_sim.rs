//! Baseband snapshots through the hybrid front end and their covariances.
//!
//! Conventions: σ_v² = 1 unless set explicitly, σ_s² = 10^(SNR/10) per
//! source, sources are uncorrelated (C_s = σ_s² I). Per snapshot the RNG
//! first draws the Q source symbols, then the M antenna noise samples.

use serde::{Deserialize, Serialize};

use crate::array_model::{check_beamformer, steering_matrix, ArrayConfig, BeamformerMatrix};
use crate::error::{domain, Error, Result};
use crate::linalg::hermitian_part;
use crate::rng::{complex_gaussian, rng_from_seed};
use crate::{CMatrix, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub snr_db: f64,
    /// σ_s², power of every source.
    pub signal_power: f64,
    /// σ_v², per-antenna noise power.
    pub noise_power: f64,
    /// N.
    pub snapshots: usize,
    /// True DOAs in degrees.
    pub thetas: Vec<f64>,
    pub seed: u64,
}

impl SimParams {
    /// Unit noise power and σ_s² = 10^(snr_db/10).
    pub fn new(snr_db: f64, snapshots: usize, thetas: &[f64], seed: u64) -> Result<Self> {
        Self::with_noise_power(snr_db, 1.0, snapshots, thetas, seed)
    }

    pub fn with_noise_power(
        snr_db: f64,
        noise_power: f64,
        snapshots: usize,
        thetas: &[f64],
        seed: u64,
    ) -> Result<Self> {
        if !snr_db.is_finite() {
            return domain(format!("SNR {snr_db} dB is not finite"));
        }
        let p = SimParams {
            snr_db,
            signal_power: noise_power * 10f64.powf(snr_db / 10.0),
            noise_power,
            snapshots,
            thetas: thetas.to_vec(),
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    /// No sources at all: y(n) = Wᴴv(n).
    pub fn noise_only(snapshots: usize, seed: u64) -> Result<Self> {
        let p = SimParams {
            snr_db: f64::NEG_INFINITY,
            signal_power: 0.0,
            noise_power: 1.0,
            snapshots,
            thetas: Vec::new(),
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn is_noise_only(&self) -> bool {
        self.signal_power == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.snapshots == 0 {
            return domain("need at least one snapshot");
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return domain("noise power must be positive");
        }
        if self.signal_power == 0.0 {
            if !self.thetas.is_empty() {
                return domain("zero signal power requires an empty source list");
            }
        } else if !(self.signal_power > 0.0 && self.signal_power.is_finite()) {
            return domain("signal power must be positive");
        }
        Ok(())
    }
}

/// Received samples y(n), one column per snapshot (K×N).
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotBatch {
    pub y: CMatrix,
    pub params: SimParams,
    /// Seed of the combiner that produced the batch.
    pub w_seed: u64,
}

pub fn simulate_snapshots(
    cfg: &ArrayConfig,
    w: &BeamformerMatrix,
    params: &SimParams,
) -> Result<SnapshotBatch> {
    check_beamformer(w, cfg)?;
    params.validate()?;
    let q = params.thetas.len();
    if q >= cfg.subarrays {
        return domain(format!(
            "{q} sources are not identifiable with {} RF chains",
            cfg.subarrays
        ));
    }
    for &t in &params.thetas {
        if t.abs() > cfg.region_deg {
            return domain(format!("source at {t}° outside ±{}°", cfg.region_deg));
        }
    }
    let a = if q > 0 { Some(steering_matrix(&params.thetas, cfg)?.a) } else { None };

    let m = cfg.elements;
    let mut rng = rng_from_seed(params.seed);
    let mut y = CMatrix::zeros(cfg.subarrays, params.snapshots);
    let mut s = vec![C64::new(0.0, 0.0); q];
    let mut x = vec![C64::new(0.0, 0.0); m];
    for n in 0..params.snapshots {
        for sq in s.iter_mut() {
            *sq = complex_gaussian(&mut rng, params.signal_power);
        }
        for xm in x.iter_mut() {
            *xm = complex_gaussian(&mut rng, params.noise_power);
        }
        if let Some(a) = &a {
            for (qi, sq) in s.iter().enumerate() {
                for (row, xm) in x.iter_mut().enumerate() {
                    *xm += a[(row, qi)] * sq;
                }
            }
        }
        for (k, v) in w.combine(&x).into_iter().enumerate() {
            y[(k, n)] = v;
        }
    }
    Ok(SnapshotBatch { y, params: params.clone(), w_seed: w.seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Exact,
    Sample,
}

/// A K×K covariance (exact C or sample C̃) with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub matrix: CMatrix,
    pub kind: CovarianceKind,
    /// N for sample covariances.
    pub snapshots: Option<usize>,
    pub thetas: Vec<f64>,
    pub signal_power: f64,
    pub noise_power: f64,
}

impl CovarianceEstimate {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Same estimate with the matrix multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.matrix *= C64::new(c, 0.0);
        out
    }
}

/// C = Wᴴ(A C_s Aᴴ + σ_v² I)W with C_s = σ_s² I.
pub fn exact_covariance(
    cfg: &ArrayConfig,
    w: &BeamformerMatrix,
    thetas: &[f64],
    signal_power: f64,
    noise_power: f64,
) -> Result<CovarianceEstimate> {
    check_beamformer(w, cfg)?;
    if !(signal_power >= 0.0 && noise_power >= 0.0) {
        return domain("powers must be non-negative");
    }
    let mut c = w.gram() * C64::new(noise_power, 0.0);
    if !thetas.is_empty() && signal_power > 0.0 {
        let at = w.virtual_matrix(&steering_matrix(thetas, cfg)?.a);
        c += (&at * at.adjoint()) * C64::new(signal_power, 0.0);
    }
    Ok(CovarianceEstimate {
        matrix: hermitian_part(&c),
        kind: CovarianceKind::Exact,
        snapshots: None,
        thetas: thetas.to_vec(),
        signal_power,
        noise_power,
    })
}

/// C̃ = (1/N) Σ y(n) y(n)ᴴ.
pub fn sample_covariance(batch: &SnapshotBatch) -> Result<CovarianceEstimate> {
    let n = batch.y.ncols();
    if n == 0 {
        return Err(Error::Domain("empty snapshot batch".into()));
    }
    let c = (&batch.y * batch.y.adjoint()) * C64::new(1.0 / n as f64, 0.0);
    Ok(CovarianceEstimate {
        matrix: hermitian_part(&c),
        kind: CovarianceKind::Sample,
        snapshots: Some(n),
        thetas: batch.params.thetas.clone(),
        signal_power: batch.params.signal_power,
        noise_power: batch.params.noise_power,
    })
}
