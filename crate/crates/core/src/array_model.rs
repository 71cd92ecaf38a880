//! Uniform linear array geometry and the overlapped-subarray analog combiner.
//!
//! Antennas and subarrays are 1-indexed in the docs and 0-indexed in code.
//! The selection matrices `J_k` are never materialised; [`subarray_rows`]
//! returns the row range instead.

use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabelGrid;
use crate::error::{domain, shape, Result};
use crate::rng::rng_from_seed;
use crate::{CMatrix, CVector, C64};

/// Geometry and partition of the hybrid receive array.
///
/// Invariant: `elements = subarrays * subarray_size - (subarrays - 1) * overlap`
/// with `0 <= overlap < subarray_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    /// M, number of antennas.
    pub elements: usize,
    /// M_s, antennas per subarray.
    pub subarray_size: usize,
    /// ΔM_s, antennas shared by adjacent subarrays.
    pub overlap: usize,
    /// K, subarrays (= RF chains).
    pub subarrays: usize,
    /// Inter-element spacing d.
    pub spacing: f64,
    /// Carrier wavelength λ, same unit as `spacing`.
    pub wavelength: f64,
    /// θ0: sources lie in [-θ0, θ0] degrees.
    pub region_deg: f64,
    /// Δθ: label grid step in degrees.
    pub grid_step_deg: f64,
}

impl ArrayConfig {
    /// Builds a config from the partition; M follows from K, M_s and ΔM_s.
    /// Spacing defaults to half a wavelength, the region to [-90°, 90°] on a
    /// 1° grid.
    pub fn new(subarray_size: usize, overlap: usize, subarrays: usize) -> Result<Self> {
        if subarrays == 0 || subarray_size == 0 {
            return domain("subarray count and size must be at least 1");
        }
        if overlap >= subarray_size {
            return domain(format!(
                "overlap {overlap} must be smaller than subarray size {subarray_size}"
            ));
        }
        let cfg = ArrayConfig {
            elements: subarrays * subarray_size - (subarrays - 1) * overlap,
            subarray_size,
            overlap,
            subarrays,
            spacing: 0.5,
            wavelength: 1.0,
            region_deg: 90.0,
            grid_step_deg: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds a config from M, M_s and ΔM_s, deriving K.
    pub fn from_elements(elements: usize, subarray_size: usize, overlap: usize) -> Result<Self> {
        if subarray_size == 0 || overlap >= subarray_size {
            return domain(format!(
                "need 0 <= overlap ({overlap}) < subarray size ({subarray_size})"
            ));
        }
        if elements < subarray_size {
            return domain(format!("{elements} elements cannot hold a subarray of {subarray_size}"));
        }
        let hop = subarray_size - overlap;
        if !(elements - overlap).is_multiple_of(hop) {
            return domain(format!(
                "M={elements} is not K*{subarray_size} - (K-1)*{overlap} for any integer K"
            ));
        }
        Self::new(subarray_size, overlap, (elements - overlap) / hop)
    }

    /// M=128, M_s=16, ΔM_s=8 (K=15) over [-90°, 90°] at 1°.
    pub fn full_scale() -> Self {
        Self::from_elements(128, 16, 8).expect("valid partition")
    }

    /// M=32, M_s=8, ΔM_s=4 (K=7) over [-60°, 60°] at 1°.
    pub fn scaled_osa() -> Self {
        Self::from_elements(32, 8, 4)
            .and_then(|c| c.with_region(60.0, 1.0))
            .expect("valid partition")
    }

    /// The non-overlapped partition with the same M and M_s.
    pub fn to_nosa(&self) -> Result<Self> {
        let mut nosa = Self::from_elements(self.elements, self.subarray_size, 0)?;
        nosa.spacing = self.spacing;
        nosa.wavelength = self.wavelength;
        nosa.region_deg = self.region_deg;
        nosa.grid_step_deg = self.grid_step_deg;
        Ok(nosa)
    }

    pub fn with_region(mut self, region_deg: f64, grid_step_deg: f64) -> Result<Self> {
        self.region_deg = region_deg;
        self.grid_step_deg = grid_step_deg;
        self.validate()?;
        Ok(self)
    }

    pub fn with_spacing(mut self, spacing: f64, wavelength: f64) -> Result<Self> {
        self.spacing = spacing;
        self.wavelength = wavelength;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let ArrayConfig { elements, subarray_size, overlap, subarrays, .. } = *self;
        if subarrays == 0 || subarray_size == 0 || overlap >= subarray_size {
            return domain("need K >= 1, M_s >= 1 and 0 <= ΔM_s < M_s");
        }
        if elements != subarrays * subarray_size - (subarrays - 1) * overlap {
            return domain(format!(
                "M={elements} != K*M_s - (K-1)*ΔM_s = {}",
                subarrays * subarray_size - (subarrays - 1) * overlap
            ));
        }
        if !(self.spacing > 0.0 && self.wavelength > 0.0) {
            return domain("spacing and wavelength must be positive");
        }
        if !(self.region_deg > 0.0 && self.region_deg <= 90.0) {
            return domain(format!("region half-width {} outside (0, 90]", self.region_deg));
        }
        LabelGrid::new(self.region_deg, self.grid_step_deg)?;
        Ok(())
    }

    /// Phase increment per element for a unit sine: 2π d / λ.
    pub fn wavenumber_spacing(&self) -> f64 {
        2.0 * PI * self.spacing / self.wavelength
    }

    pub fn grid(&self) -> LabelGrid {
        LabelGrid::new(self.region_deg, self.grid_step_deg).expect("validated grid")
    }

    pub fn is_overlapped(&self) -> bool {
        self.overlap > 0
    }
}

pub(crate) fn check_angle(theta_deg: f64) -> Result<()> {
    if !theta_deg.is_finite() || !(-90.0..=90.0).contains(&theta_deg) {
        return domain(format!("angle {theta_deg}° outside [-90°, 90°]"));
    }
    Ok(())
}

/// a(θ): element m is exp(j 2π/λ m d sin θ).
pub fn steering_vector(theta_deg: f64, cfg: &ArrayConfig) -> Result<CVector> {
    check_angle(theta_deg)?;
    let step = cfg.wavenumber_spacing() * theta_deg.to_radians().sin();
    Ok(CVector::from_iterator(
        cfg.elements,
        (0..cfg.elements).map(|m| C64::from_polar(1.0, step * m as f64)),
    ))
}

/// A(θ) = [a(θ_1), ..., a(θ_Q)] together with the angles it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringMatrix {
    pub a: CMatrix,
    pub thetas: Vec<f64>,
}

pub fn steering_matrix(thetas: &[f64], cfg: &ArrayConfig) -> Result<SteeringMatrix> {
    if thetas.is_empty() {
        return domain("steering matrix needs at least one angle");
    }
    for (i, a) in thetas.iter().enumerate() {
        if thetas[..i].contains(a) {
            return domain(format!("duplicate source angle {a}°"));
        }
    }
    let mut a = CMatrix::zeros(cfg.elements, thetas.len());
    for (q, &t) in thetas.iter().enumerate() {
        a.set_column(q, &steering_vector(t, cfg)?);
    }
    Ok(SteeringMatrix { a, thetas: thetas.to_vec() })
}

/// 0-based antenna rows of subarray `k` (1-based), i.e. the support of J_k.
pub fn subarray_rows(k: usize, cfg: &ArrayConfig) -> Result<Range<usize>> {
    if k == 0 || k > cfg.subarrays {
        return domain(format!("subarray index {k} outside 1..={}", cfg.subarrays));
    }
    let start = (k - 1) * (cfg.subarray_size - cfg.overlap);
    Ok(start..start + cfg.subarray_size)
}

/// How the analog phase shifts α_{k,m} are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhasePolicy {
    /// i.i.d. U[0, 2π) from the seed.
    RandomUniform,
    AllZero,
    /// `phases[k][m]` for subarray k and its m-th element.
    UserSupplied(Vec<Vec<f64>>),
}

impl PhasePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            PhasePolicy::RandomUniform => "random_uniform",
            PhasePolicy::AllZero => "all_zero",
            PhasePolicy::UserSupplied(_) => "user_supplied",
        }
    }
}

/// The M×K analog combiner. Column k is nonzero only on
/// [`subarray_rows`]`(k)` where it equals e^{jα_{k,m}} / √M_s.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerMatrix {
    pub w: CMatrix,
    pub phases: Vec<Vec<f64>>,
    pub seed: u64,
    pub policy: PhasePolicy,
    rows: Vec<Range<usize>>,
}

pub fn build_beamformer(
    cfg: &ArrayConfig,
    policy: &PhasePolicy,
    seed: u64,
) -> Result<BeamformerMatrix> {
    cfg.validate()?;
    let (k_count, ms) = (cfg.subarrays, cfg.subarray_size);
    let phases: Vec<Vec<f64>> = match policy {
        PhasePolicy::RandomUniform => {
            let mut rng = rng_from_seed(seed);
            (0..k_count)
                .map(|_| (0..ms).map(|_| rng.random::<f64>() * 2.0 * PI).collect())
                .collect()
        }
        PhasePolicy::AllZero => vec![vec![0.0; ms]; k_count],
        PhasePolicy::UserSupplied(p) => {
            if p.len() != k_count || p.iter().any(|row| row.len() != ms) {
                return shape(format!("user phases must be {k_count} rows of {ms} values"));
            }
            if p.iter().flatten().any(|a| !a.is_finite()) {
                return domain("user phases must be finite");
            }
            p.clone()
        }
    };
    let amp = 1.0 / (ms as f64).sqrt();
    let mut w = CMatrix::zeros(cfg.elements, k_count);
    let mut rows = Vec::with_capacity(k_count);
    for (k, alpha) in phases.iter().enumerate() {
        let r = subarray_rows(k + 1, cfg)?;
        for (m, &a) in r.clone().zip(alpha) {
            w[(m, k)] = C64::from_polar(amp, a);
        }
        rows.push(r);
    }
    Ok(BeamformerMatrix { w, phases, seed, policy: policy.clone(), rows })
}

impl BeamformerMatrix {
    pub fn subarrays(&self) -> usize {
        self.w.ncols()
    }

    pub fn elements(&self) -> usize {
        self.w.nrows()
    }

    /// Support of column `k` (0-based).
    pub fn column_rows(&self, k: usize) -> Range<usize> {
        self.rows[k].clone()
    }

    /// Wᴴx for an M-vector, using the block sparsity of W.
    pub fn combine(&self, x: &[C64]) -> Vec<C64> {
        self.rows
            .iter()
            .enumerate()
            .map(|(k, r)| r.clone().map(|m| self.w[(m, k)].conj() * x[m]).sum())
            .collect()
    }

    /// WᴴW.
    pub fn gram(&self) -> CMatrix {
        self.w.adjoint() * &self.w
    }

    /// Ã = WᴴA.
    pub fn virtual_matrix(&self, a: &CMatrix) -> CMatrix {
        self.w.adjoint() * a
    }

    fn check(&self, cfg: &ArrayConfig) -> Result<()> {
        if self.w.nrows() != cfg.elements || self.w.ncols() != cfg.subarrays {
            return shape(format!(
                "W is {}x{} but config needs {}x{}",
                self.w.nrows(),
                self.w.ncols(),
                cfg.elements,
                cfg.subarrays
            ));
        }
        Ok(())
    }
}

/// ã(θ) = Wᴴ a(θ), length K.
pub fn virtual_steering(theta_deg: f64, w: &BeamformerMatrix, cfg: &ArrayConfig) -> Result<CVector> {
    w.check(cfg)?;
    let a = steering_vector(theta_deg, cfg)?;
    Ok(CVector::from_vec(w.combine(a.as_slice())))
}

pub(crate) fn check_beamformer(w: &BeamformerMatrix, cfg: &ArrayConfig) -> Result<()> {
    w.check(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn close(a: C64, b: C64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn partition_identity() {
        let cfg = ArrayConfig::full_scale();
        assert_eq!(cfg.subarrays, 15);
        assert_eq!(cfg.to_nosa().unwrap().subarrays, 8);
        let s = ArrayConfig::scaled_osa();
        assert_eq!((s.elements, s.subarrays), (32, 7));
        assert_eq!(s.to_nosa().unwrap().subarrays, 4);
        assert!(ArrayConfig::new(4, 4, 3).is_err());
        assert!(ArrayConfig::from_elements(30, 8, 4).is_err());
    }

    #[test]
    fn steering_examples() {
        let cfg = ArrayConfig::new(1, 0, 4).unwrap();
        let a0 = steering_vector(0.0, &cfg).unwrap();
        assert!(a0.iter().all(|&z| close(z, C64::new(1.0, 0.0))));

        let cfg2 = ArrayConfig::new(1, 0, 2).unwrap();
        let a90 = steering_vector(90.0, &cfg2).unwrap();
        assert!(close(a90[0], C64::new(1.0, 0.0)) && close(a90[1], C64::new(-1.0, 0.0)));

        let a30 = steering_vector(30.0, &cfg).unwrap();
        let expect = [C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(-1.0, 0.0), C64::new(0.0, -1.0)];
        for (z, e) in a30.iter().zip(expect) {
            assert!(close(*z, e), "{z} vs {e}");
        }
        assert!(steering_vector(90.5, &cfg).is_err());
        assert!(steering_vector(f64::NAN, &cfg).is_err());
    }

    #[test]
    fn steering_matrix_columns_and_duplicates() {
        let cfg = ArrayConfig::new(1, 0, 8).unwrap();
        let sm = steering_matrix(&[10.0, 20.0], &cfg).unwrap();
        for (q, t) in [10.0f64, 20.0].iter().enumerate() {
            for m in 0..8 {
                let phase = PI * m as f64 * t.to_radians().sin();
                assert!(close(sm.a[(m, q)], C64::new(phase.cos(), phase.sin())));
            }
        }
        let single = steering_matrix(&[5.0], &cfg).unwrap();
        assert_eq!(single.a.column(0).into_owned(), steering_vector(5.0, &cfg).unwrap());
        assert!(steering_matrix(&[0.0, 0.0], &cfg).is_err());
        assert!(steering_matrix(&[], &cfg).is_err());
    }

    #[test]
    fn subarray_row_ranges() {
        let cfg = ArrayConfig::new(16, 8, 15).unwrap();
        assert_eq!(subarray_rows(1, &cfg).unwrap(), 0..16);
        assert_eq!(subarray_rows(2, &cfg).unwrap(), 8..24);
        assert_eq!(subarray_rows(15, &cfg).unwrap(), 112..128);
        assert!(subarray_rows(0, &cfg).is_err());
        assert!(subarray_rows(16, &cfg).is_err());
        let nosa = ArrayConfig::new(4, 0, 3).unwrap();
        assert_eq!(subarray_rows(3, &nosa).unwrap(), 8..12);
    }

    #[test]
    fn beamformer_structure() {
        let cfg = ArrayConfig::full_scale();
        let w = build_beamformer(&cfg, &PhasePolicy::RandomUniform, 11).unwrap();
        assert_eq!(w.subarrays(), 15);
        for k in 0..15 {
            let rows = subarray_rows(k + 1, &cfg).unwrap();
            let mut norm = 0.0;
            for m in 0..cfg.elements {
                let z = w.w[(m, k)];
                if rows.contains(&m) {
                    assert_abs_diff_eq!(z.norm(), 0.25, epsilon = 1e-15);
                } else {
                    assert_eq!(z, C64::new(0.0, 0.0));
                }
                norm += z.norm_sqr();
            }
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        }
        // adjacent columns share exactly ΔM_s rows
        for k in 0..14 {
            let shared = (0..cfg.elements)
                .filter(|&m| w.w[(m, k)].norm() > 0.0 && w.w[(m, k + 1)].norm() > 0.0)
                .count();
            assert_eq!(shared, 8);
        }
        let again = build_beamformer(&cfg, &PhasePolicy::RandomUniform, 11).unwrap();
        assert_eq!(w, again);
    }

    #[test]
    fn all_zero_and_user_phases() {
        let cfg = ArrayConfig::new(4, 2, 3).unwrap();
        let w = build_beamformer(&cfg, &PhasePolicy::AllZero, 0).unwrap();
        for k in 0..3 {
            for m in w.column_rows(k) {
                assert!(close(w.w[(m, k)], C64::new(0.5, 0.0)));
            }
        }
        let bad = PhasePolicy::UserSupplied(vec![vec![0.0; 4]; 2]);
        assert!(build_beamformer(&cfg, &bad, 0).is_err());
        let good = PhasePolicy::UserSupplied(vec![vec![PI; 4]; 3]);
        let w = build_beamformer(&cfg, &good, 0).unwrap();
        assert!(close(w.w[(0, 0)], C64::new(-0.5, 0.0)));
    }

    #[test]
    fn gram_matrix_pattern() {
        for overlap in [0usize, 2] {
            let cfg = ArrayConfig::new(4, overlap, 4).unwrap();
            let w = build_beamformer(&cfg, &PhasePolicy::RandomUniform, 5).unwrap();
            let g = w.gram();
            for k in 0..4 {
                assert_abs_diff_eq!(g[(k, k)].re, 1.0, epsilon = 1e-12);
                if k + 1 < 4 {
                    assert_eq!(g[(k, k + 1)].norm() > 1e-12, overlap > 0);
                }
            }
        }
    }

    #[test]
    fn virtual_steering_all_zero_and_dense_oracle() {
        let cfg = ArrayConfig::new(4, 2, 3).unwrap();
        let w0 = build_beamformer(&cfg, &PhasePolicy::AllZero, 0).unwrap();
        let v = virtual_steering(0.0, &w0, &cfg).unwrap();
        assert!(v.iter().all(|&z| close(z, C64::new(2.0, 0.0))));

        let full = ArrayConfig::full_scale();
        let w = build_beamformer(&full, &PhasePolicy::RandomUniform, 3).unwrap();
        let v = virtual_steering(23.7, &w, &full).unwrap();
        assert_eq!(v.len(), 15);
        let a = steering_vector(23.7, &full).unwrap();
        for k in 0..15 {
            let mut acc = C64::new(0.0, 0.0);
            for m in 0..full.elements {
                acc += w.w[(m, k)].conj() * a[m];
            }
            assert!((acc - v[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn conjugate_symmetry_in_angle() {
        let cfg = ArrayConfig::new(8, 4, 3).unwrap();
        for t in [3.0, 17.5, 44.0, 89.0] {
            let p = steering_vector(t, &cfg).unwrap();
            let n = steering_vector(-t, &cfg).unwrap();
            for (x, y) in p.iter().zip(n.iter()) {
                assert!(close(x.conj(), *y));
            }
        }
    }
}
