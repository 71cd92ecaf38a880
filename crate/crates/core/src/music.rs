//! MUSIC on the combined K×K covariance.
//!
//! With `whiten` set, the covariance and the virtual steering vectors are
//! both multiplied by `T = (WᴴW)^{-1/2}`, which turns the coloured noise
//! σ²WᴴW of overlapped subarrays into σ²I. The pseudo-spectrum uses
//! unit-norm steering vectors, `P(θ) = ‖ã‖² / ‖E_nᴴ ã‖²`, and is scaled to a
//! maximum of 1.
//!
//! The noise subspace holds the K−Q eigenvectors of the smallest
//! eigenvalues plus any further eigenvectors whose eigenvalue is tied
//! (within `tie_tolerance` relative to the largest eigenvalue) with the
//! largest of those K−Q. A degenerate boundary therefore never splits an
//! eigenspace arbitrarily.

use serde::{Deserialize, Serialize};

use crate::array_model::{check_beamformer, steering_vector, ArrayConfig, BeamformerMatrix};
use crate::dataset::LabelGrid;
use crate::error::{domain, shape, Result};
use crate::linalg::{hermitian_eigen, hermitian_part, inv_sqrt_hpd};
use crate::{CMatrix, CVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicConfig {
    pub grid: LabelGrid,
    pub whiten: bool,
    /// Number of sources Q.
    pub sources: usize,
    pub tie_tolerance: f64,
}

impl MusicConfig {
    pub fn new(grid: LabelGrid, sources: usize, whiten: bool) -> Self {
        MusicConfig { grid, whiten, sources, tie_tolerance: 1e-9 }
    }

    /// Grid of `cfg`, whitened.
    pub fn for_array(cfg: &ArrayConfig, sources: usize) -> Self {
        Self::new(cfg.grid(), sources, true)
    }
}

/// Pseudo-spectrum over the grid together with the noise-subspace size used.
#[derive(Debug, Clone, PartialEq)]
pub struct MusicSpectrum {
    pub values: Vec<f64>,
    pub noise_dim: usize,
}

pub fn music_spectrum_full(
    c: &CMatrix,
    w: &BeamformerMatrix,
    cfg: &ArrayConfig,
    mcfg: &MusicConfig,
) -> Result<MusicSpectrum> {
    check_beamformer(w, cfg)?;
    let k = w.subarrays();
    if c.nrows() != k || c.ncols() != k {
        return shape(format!("covariance is {}x{}, expected {k}x{k}", c.nrows(), c.ncols()));
    }
    let q = mcfg.sources;
    if q == 0 || q >= k {
        return domain(format!("MUSIC needs 1 <= Q < K, got Q={q}, K={k}"));
    }
    if mcfg.grid.half_width_deg > cfg.region_deg + 1e-9 {
        return domain("MUSIC grid exceeds the array's angular region");
    }
    let t = if mcfg.whiten { Some(inv_sqrt_hpd(&w.gram())?) } else { None };
    let cw = match &t {
        Some(t) => hermitian_part(&(t * c * t)),
        None => hermitian_part(c),
    };
    let eig = hermitian_eigen(&cw)?;
    let mut noise_dim = k - q;
    let boundary = eig.values[noise_dim - 1];
    let tol = mcfg.tie_tolerance * eig.values[k - 1].abs().max(f64::MIN_POSITIVE);
    while noise_dim < k && (eig.values[noise_dim] - boundary).abs() <= tol {
        noise_dim += 1;
    }
    if noise_dim > k - q {
        log::debug!("MUSIC: {} eigenvalues tied at the subspace boundary", noise_dim - (k - q) + 1);
    }
    let en = eig.vectors.columns(0, noise_dim);

    let mut values = Vec::with_capacity(mcfg.grid.len());
    for theta in mcfg.grid.angles() {
        let a = steering_vector(theta, cfg)?;
        let mut v = CVector::from_vec(w.combine(a.as_slice()));
        if let Some(t) = &t {
            v = t * v;
        }
        let norm2 = v.norm_squared();
        let proj = en.adjoint() * &v;
        let denom = proj.norm_squared().max(f64::MIN_POSITIVE);
        values.push(norm2.max(f64::MIN_POSITIVE) / denom);
    }
    let peak = values.iter().cloned().fold(0.0f64, f64::max);
    values.iter_mut().for_each(|v| *v /= peak);
    Ok(MusicSpectrum { values, noise_dim })
}

/// Normalised MUSIC pseudo-spectrum, one value per grid point.
pub fn music_spectrum(
    c: &CMatrix,
    w: &BeamformerMatrix,
    cfg: &ArrayConfig,
    mcfg: &MusicConfig,
) -> Result<Vec<f64>> {
    Ok(music_spectrum_full(c, w, cfg, mcfg)?.values)
}

/// Grid indices of the Q largest local maxima (strictly above every
/// neighbour; endpoints have one). Missing peaks are filled with the
/// largest remaining values. Sorted ascending.
pub fn select_peaks(spectrum: &[f64], q: usize) -> Result<Vec<usize>> {
    let n = spectrum.len();
    if q == 0 || q > n {
        return domain(format!("cannot select {q} peaks from {n} points"));
    }
    let is_peak = |i: usize| {
        (i == 0 || spectrum[i] > spectrum[i - 1]) && (i + 1 == n || spectrum[i] > spectrum[i + 1])
    };
    let by_value = |a: &usize, b: &usize| spectrum[*b].total_cmp(&spectrum[*a]).then(a.cmp(b));
    let mut peaks: Vec<usize> = (0..n).filter(|&i| n > 1 && is_peak(i)).collect();
    peaks.sort_by(by_value);
    peaks.truncate(q);
    if peaks.len() < q {
        let mut rest: Vec<usize> = (0..n).filter(|i| !peaks.contains(i)).collect();
        rest.sort_by(by_value);
        peaks.extend(rest.into_iter().take(q - peaks.len()));
    }
    peaks.sort_unstable();
    Ok(peaks)
}

/// Q angle estimates in degrees, ascending.
pub fn music_estimate(
    c: &CMatrix,
    w: &BeamformerMatrix,
    cfg: &ArrayConfig,
    mcfg: &MusicConfig,
) -> Result<Vec<f64>> {
    let spectrum = music_spectrum(c, w, cfg, mcfg)?;
    Ok(select_peaks(&spectrum, mcfg.sources)?.into_iter().map(|i| mcfg.grid.angle(i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array_model::{build_beamformer, PhasePolicy};
    use crate::signal_sim::exact_covariance;

    #[test]
    fn peaks_contract() {
        let s = [0.1, 0.5, 0.2, 0.9, 0.3, 0.3, 0.8];
        assert_eq!(select_peaks(&s, 2).unwrap(), vec![3, 6]);
        assert_eq!(select_peaks(&s, 3).unwrap(), vec![1, 3, 6]);
        // plateau 0.3,0.3 is not a peak, fallback takes the largest leftovers
        assert_eq!(select_peaks(&s, 4).unwrap(), vec![1, 3, 4, 6]);
        let flat = [1.0; 5];
        assert_eq!(select_peaks(&flat, 2).unwrap(), vec![0, 1]);
        assert!(select_peaks(&flat, 6).is_err());
        assert!(select_peaks(&flat, 0).is_err());
    }

    #[test]
    fn full_digital_single_source() {
        let cfg = ArrayConfig::new(1, 0, 10).unwrap();
        let w = build_beamformer(&cfg, &PhasePolicy::AllZero, 0).unwrap();
        let c = exact_covariance(&cfg, &w, &[10.0], 1.0, 1.0).unwrap();
        let mcfg = MusicConfig::new(cfg.grid(), 1, false);
        let s = music_spectrum(&c.matrix, &w, &cfg, &mcfg).unwrap();
        let best = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        assert_eq!(best, 100);
        assert_eq!(music_estimate(&c.matrix, &w, &cfg, &mcfg).unwrap(), vec![10.0]);
    }

    #[test]
    fn rejects_bad_source_count() {
        let cfg = ArrayConfig::scaled_osa();
        let w = build_beamformer(&cfg, &PhasePolicy::RandomUniform, 1).unwrap();
        let c = exact_covariance(&cfg, &w, &[0.0], 1.0, 1.0).unwrap();
        let mcfg = MusicConfig::new(cfg.grid(), cfg.subarrays, true);
        assert!(music_spectrum(&c.matrix, &w, &cfg, &mcfg).is_err());
    }
}
