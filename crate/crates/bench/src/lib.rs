//! Shared fixtures for the criterion benchmarks.

use osa_doa::{
    build_beamformer, sample_covariance, simulate_snapshots, ArrayConfig, BeamformerMatrix, CMatrix, PhasePolicy,
    SimParams,
};

/// Scaled overlapped array, its combiner and one sample covariance of a
/// source at 10.1° (10 dB, N = 100).
pub struct Fixture {
    pub cfg: ArrayConfig,
    pub w: BeamformerMatrix,
    pub covariance: CMatrix,
}

impl Fixture {
    pub fn scaled() -> Self {
        Self::for_array(ArrayConfig::scaled_osa())
    }

    pub fn for_array(cfg: ArrayConfig) -> Self {
        let w = build_beamformer(&cfg, &PhasePolicy::RandomUniform, 1).expect("valid array");
        let params = SimParams::new(10.0, 100, &[10.1], 7).expect("valid parameters");
        let covariance = sample_covariance(&simulate_snapshots(&cfg, &w, &params).expect("simulates"))
            .expect("nonempty batch")
            .matrix;
        Fixture { cfg, w, covariance }
    }
}
