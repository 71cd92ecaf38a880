//! Fisher information and Cramér-Rao bound for the DOAs θ of Q uncorrelated
//! equal-power sources seen through the combiner W, with the source and
//! noise powers known.
//!
//! With `a_q = a(θ_q)`, `ã_q = Wᴴa_q` and `b_q = Wᴴ(∂a_q/∂θ_q)`:
//!
//! ```text
//! ∂C/∂θ_q = σ_s² (b_q ã_qᴴ + ã_q b_qᴴ)
//! F_pq    = tr(C⁻¹ ∂C/∂θ_p C⁻¹ ∂C/∂θ_q)
//!         = 2 Re{X ⊙ Xᵀ + Y ⊙ Zᵀ},  X = C_s Ãᴴ C⁻¹ B,  Y = C_s Ãᴴ C⁻¹ Ã C_s,  Z = Bᴴ C⁻¹ B
//! CRLB    = F⁻¹ / N
//! ```
//!
//! Angles are in degrees at the interface; F is per radian².

use nalgebra::DMatrix;

use crate::array_model::{check_beamformer, steering_matrix, steering_vector, ArrayConfig, BeamformerMatrix};
use crate::error::{domain, Error, Result};
use crate::linalg::{hermitian_part, inv_hpd, symmetric_condition};
use crate::signal_sim::exact_covariance;
use crate::{CMatrix, CVector, C64};

/// Condition number above which F is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Relative disagreement between the two Fisher formulas treated as a
/// numerical failure.
pub const FORM_AGREEMENT: f64 = 1e-6;
/// rad² → deg².
pub const RAD2_TO_DEG2: f64 = (180.0 / std::f64::consts::PI) * (180.0 / std::f64::consts::PI);

/// ∂a(θ)/∂θ per radian: element m is j(2π/λ)·m·d·cosθ·a_m(θ).
pub fn steering_derivative(theta_deg: f64, cfg: &ArrayConfig) -> Result<CVector> {
    let a = steering_vector(theta_deg, cfg)?;
    if (theta_deg.abs() - 90.0).abs() < 1e-12 {
        log::warn!("steering derivative vanishes at θ = {theta_deg}°");
    }
    let g = cfg.wavenumber_spacing() * theta_deg.to_radians().cos();
    Ok(CVector::from_iterator(
        cfg.elements,
        a.iter().enumerate().map(|(m, &am)| C64::new(0.0, g * m as f64) * am),
    ))
}

/// D = [d_1 a(θ_1), ..., d_Q a(θ_Q)], M×Q.
pub fn derivative_matrix(thetas: &[f64], cfg: &ArrayConfig) -> Result<CMatrix> {
    let mut d = CMatrix::zeros(cfg.elements, thetas.len());
    for (q, &t) in thetas.iter().enumerate() {
        d.set_column(q, &steering_derivative(t, cfg)?);
    }
    Ok(d)
}

/// ∂C/∂θ_q for `q` in 1..=Q.
pub fn partial_covariance(
    q: usize,
    cfg: &ArrayConfig,
    w: &BeamformerMatrix,
    thetas: &[f64],
    signal_power: f64,
) -> Result<CMatrix> {
    check_beamformer(w, cfg)?;
    if q == 0 || q > thetas.len() {
        return domain(format!("source index {q} outside 1..={}", thetas.len()));
    }
    let theta = thetas[q - 1];
    let at = CVector::from_vec(w.combine(steering_vector(theta, cfg)?.as_slice()));
    let b = CVector::from_vec(w.combine(steering_derivative(theta, cfg)?.as_slice()));
    let outer = &b * at.adjoint();
    Ok((&outer + outer.adjoint()) * C64::new(signal_power, 0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherInformation {
    /// Element form, per rad².
    pub f: DMatrix<f64>,
    /// Hadamard-product form of the same matrix.
    pub f_assembled: DMatrix<f64>,
    pub thetas: Vec<f64>,
    pub signal_power: f64,
    pub noise_power: f64,
}

impl FisherInformation {
    /// max |F_elem - F_assembled| / max |F_elem|.
    pub fn form_mismatch(&self) -> f64 {
        let scale = self.f.amax().max(f64::MIN_POSITIVE);
        (&self.f - &self.f_assembled).amax() / scale
    }

    pub fn condition(&self) -> f64 {
        symmetric_condition(&self.f)
    }
}

/// Fisher information for the angles `thetas` (degrees).
pub fn fisher_matrix(
    cfg: &ArrayConfig,
    w: &BeamformerMatrix,
    thetas: &[f64],
    signal_power: f64,
    noise_power: f64,
) -> Result<FisherInformation> {
    if !(noise_power > 0.0 && signal_power >= 0.0) {
        return domain("Fisher information needs σ_v² > 0 and σ_s² >= 0");
    }
    let c = exact_covariance(cfg, w, thetas, signal_power, noise_power)?.matrix;
    let ci = inv_hpd(&c).map_err(|_| Error::Numerical("covariance is singular".into()))?;
    let q = thetas.len();

    let partials: Vec<CMatrix> = (1..=q)
        .map(|p| partial_covariance(p, cfg, w, thetas, signal_power).map(|d| &ci * d))
        .collect::<Result<_>>()?;
    let mut f = DMatrix::zeros(q, q);
    for p in 0..q {
        for r in 0..q {
            f[(p, r)] = (&partials[p] * &partials[r]).trace().re;
        }
    }

    let at = w.virtual_matrix(&steering_matrix(thetas, cfg)?.a);
    let b = w.virtual_matrix(&derivative_matrix(thetas, cfg)?);
    let s = C64::new(signal_power, 0.0);
    let ah_ci = at.adjoint() * &ci;
    let x = &ah_ci * &b * s;
    let y = &ah_ci * &at * (s * s);
    let z = hermitian_part(&(b.adjoint() * &ci * &b));
    let f_assembled = DMatrix::from_fn(q, q, |p, r| {
        2.0 * (x[(p, r)] * x[(r, p)] + y[(p, r)] * z[(r, p)]).re
    });

    let info = FisherInformation {
        f: (&f + f.transpose()) * 0.5,
        f_assembled,
        thetas: thetas.to_vec(),
        signal_power,
        noise_power,
    };
    if info.form_mismatch() > FORM_AGREEMENT {
        return Err(Error::Numerical(format!(
            "Fisher forms disagree by {:e}",
            info.form_mismatch()
        )));
    }
    Ok(info)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrlbResult {
    /// F⁻¹/N in rad².
    pub rad2: DMatrix<f64>,
    pub snapshots: usize,
    pub condition: f64,
}

impl CrlbResult {
    /// F⁻¹/N in deg².
    pub fn deg2(&self) -> DMatrix<f64> {
        &self.rad2 * RAD2_TO_DEG2
    }

    /// Diagonal bounds per source, deg².
    pub fn per_source_deg2(&self) -> Vec<f64> {
        self.rad2.diagonal().iter().map(|v| v * RAD2_TO_DEG2).collect()
    }

    /// sqrt of the mean diagonal bound, degrees; comparable to an RMSE.
    pub fn rmse_bound_deg(&self) -> f64 {
        let d = self.per_source_deg2();
        (d.iter().sum::<f64>() / d.len() as f64).sqrt()
    }
}

/// F⁻¹/N. Fails with [`Error::Unidentifiable`] when F is numerically
/// singular.
pub fn crlb(info: &FisherInformation, snapshots: usize) -> Result<CrlbResult> {
    if snapshots == 0 {
        return domain("CRLB needs N >= 1");
    }
    let condition = info.condition();
    log::debug!("Fisher condition number {condition:e}");
    let unidentifiable = || {
        Error::Unidentifiable(format!(
            "Fisher matrix for θ = {:?}°, σ_s² = {}, σ_v² = {} has condition {condition:e}",
            info.thetas, info.signal_power, info.noise_power
        ))
    };
    if !(condition.is_finite() && condition <= MAX_CONDITION) {
        return Err(unidentifiable());
    }
    let inv = info.f.clone().cholesky().ok_or_else(unidentifiable)?.inverse();
    let inv = (&inv + inv.transpose()) * 0.5;
    Ok(CrlbResult { rad2: inv / snapshots as f64, snapshots, condition })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array_model::{build_beamformer, PhasePolicy};

    #[test]
    fn derivative_closed_forms() {
        let cfg = ArrayConfig::scaled_osa();
        let d = steering_derivative(0.0, &cfg).unwrap();
        assert_eq!(d[0], C64::new(0.0, 0.0));
        for m in 0..cfg.elements {
            assert!((d[m] - C64::new(0.0, std::f64::consts::PI * m as f64)).norm() < 1e-12);
        }
    }

    #[test]
    fn selection_identity() {
        let cfg = ArrayConfig::scaled_osa();
        let thetas = [-20.0, 5.0, 33.0];
        let d = derivative_matrix(&thetas, &cfg).unwrap();
        for q in 0..3 {
            let mut e = CMatrix::zeros(3, 3);
            e[(q, q)] = C64::new(1.0, 0.0);
            let dq = &d * e;
            let mut direct = CMatrix::zeros(cfg.elements, 3);
            direct.set_column(q, &steering_derivative(thetas[q], &cfg).unwrap());
            assert_eq!(dq, direct);
        }
    }

    #[test]
    fn zero_power_and_bad_index() {
        let cfg = ArrayConfig::scaled_osa();
        let w = build_beamformer(&cfg, &PhasePolicy::RandomUniform, 3).unwrap();
        let z = partial_covariance(1, &cfg, &w, &[10.0], 0.0).unwrap();
        assert!(z.iter().all(|v| v.norm() == 0.0));
        assert!(partial_covariance(2, &cfg, &w, &[10.0], 1.0).is_err());
        assert!(partial_covariance(0, &cfg, &w, &[10.0], 1.0).is_err());
        let f = fisher_matrix(&cfg, &w, &[10.0], 0.0, 1.0).unwrap();
        assert!(matches!(crlb(&f, 100), Err(Error::Unidentifiable(_))));
    }
}
