//! Direction-of-arrival estimation for hybrid analog/digital receive arrays
//! whose RF chains are fed by overlapped subarrays (OSA).
//!
//! The crate covers the whole pipeline:
//!
//! * [`array_model`]: ULA geometry, steering vectors and the sparse analog
//!   combiner `W` with overlapping column supports.
//! * [`signal_sim`]: baseband snapshots through the hybrid front end, exact
//!   and sample covariance matrices.
//! * [`dataset`]: feature tensors, grid labels and the binary dataset format.
//! * [`nn`]: a small deterministic neural-network engine with gradient checks.
//! * [`cdae_dnn`]: the convolutional denoising autoencoder followed by a
//!   fully-connected multi-label classifier.
//! * [`music`]: the MUSIC baseline adapted to the combined covariance.
//! * [`crlb`]: Fisher information and Cramer-Rao bound for the hybrid array.
//! * [`bench`]: Monte-Carlo RMSE harness with CSV output.

pub mod array_model;
pub mod bench;
pub mod cdae_dnn;
pub mod config;
pub mod crlb;
pub mod dataset;
mod codec;
mod error;
pub mod linalg;
pub mod music;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod signal_sim;

pub use array_model::{
    build_beamformer, steering_matrix, steering_vector, subarray_rows, virtual_steering,
    ArrayConfig, BeamformerMatrix, PhasePolicy, SteeringMatrix,
};
pub use cdae_dnn::{CdaeArch, CdaeDnn, FcArch, Prediction, TrainHyper, TrainReport};
pub use crlb::{crlb, fisher_matrix, CrlbResult, FisherInformation};
pub use dataset::{Dataset, FeatureTensor, LabelGrid, LabelVector, Sample};
pub use error::{Error, Result};
pub use music::{music_estimate, music_spectrum, MusicConfig};
pub use signal_sim::{
    exact_covariance, sample_covariance, simulate_snapshots, CovarianceEstimate, CovarianceKind,
    SimParams, SnapshotBatch,
};

/// Complex baseband sample type used throughout.
pub type C64 = num_complex::Complex64;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;
/// Dense complex column vector.
pub type CVector = nalgebra::DVector<C64>;
