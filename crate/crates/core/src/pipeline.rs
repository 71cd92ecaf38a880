//! End-to-end training from a [`Config`]: dataset generation, CDAE fit,
//! classifier fit on the frozen CDAE, optional joint fine-tuning.

use crate::array_model::ArrayConfig;
use crate::bench::TrainedModel;
use crate::cdae_dnn::{
    build_cdae, build_fc, denoising_ratios, finetune_joint, train_cdae, train_fc, validation_bce, CdaeDnn,
    TrainReport,
};
use crate::config::{Config, Precision};
use crate::dataset::{generate_dataset, Dataset};
use crate::error::Result;
use crate::nn::{Scalar, Sequential};
use crate::rng::{derive_seed, stream};

/// Training and validation sets for `array` as described by `[dataset]`.
pub fn datasets(cfg: &Config, array: &ArrayConfig) -> Result<(Dataset, Dataset)> {
    let train = generate_dataset(&cfg.dataset_spec(false), array)?;
    let validation = generate_dataset(&cfg.dataset_spec(true), array)?;
    Ok((train, validation))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub cdae: TrainReport,
    pub fc: TrainReport,
    pub joint: Option<TrainReport>,
    /// Median of `‖R̂ - R‖_F / ‖R̃ - R‖_F` over the validation set.
    pub median_denoising_ratio: f64,
    pub validation_bce: f64,
}

/// Initialisation seeds of the two networks.
pub fn model_seeds(train_seed: u64) -> (u64, u64) {
    (derive_seed(train_seed, stream::INIT, 0x43), derive_seed(train_seed, stream::INIT, 0x46))
}

pub fn train_cdae_stage<T: Scalar>(
    cfg: &Config,
    k: usize,
    train: &Dataset,
    validation: Option<&Dataset>,
) -> Result<(Sequential<T>, TrainReport)> {
    let mut cdae = build_cdae::<T>(&cfg.cdae, k, model_seeds(cfg.train.seed).0)?;
    let report = train_cdae(&mut cdae, train, validation, &cfg.train.cdae_hyper())?;
    Ok((cdae, report))
}

pub fn train_fc_stage<T: Scalar>(
    cfg: &Config,
    cdae: &Sequential<T>,
    train: &Dataset,
    validation: Option<&Dataset>,
) -> Result<(Sequential<T>, TrainReport)> {
    let k = cdae.input_shape()[1];
    let mut fc = build_fc::<T>(&cfg.fc, k, train.grid().len(), model_seeds(cfg.train.seed).1)?;
    let report = train_fc(&mut fc, cdae, train, validation, &cfg.train.fc_hyper())?;
    Ok((fc, report))
}

fn run<T: Scalar>(cfg: &Config, train: &Dataset, validation: &Dataset) -> Result<(CdaeDnn<T>, PipelineReport)> {
    let k = train.k();
    let (mut cdae, cdae_report) = train_cdae_stage::<T>(cfg, k, train, Some(validation))?;
    let mut ratios = denoising_ratios(&cdae, validation)?;
    ratios.sort_by(f64::total_cmp);
    let median_denoising_ratio = median_sorted(&ratios);
    let (mut fc, fc_report) = train_fc_stage(cfg, &cdae, train, Some(validation))?;
    let joint = if cfg.train.joint_finetune {
        Some(finetune_joint(&mut cdae, &mut fc, train, &cfg.train.fc_hyper())?)
    } else {
        None
    };
    let bce = validation_bce(&cdae, &fc, validation)?;
    let model = CdaeDnn::new(cdae, fc, train.grid())?;
    Ok((
        model,
        PipelineReport { cdae: cdae_report, fc: fc_report, joint, median_denoising_ratio, validation_bce: bce },
    ))
}

fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains both stages on the given sets in the configured precision.
pub fn train_on(cfg: &Config, train: &Dataset, validation: &Dataset) -> Result<(TrainedModel, PipelineReport)> {
    match cfg.train.precision {
        Precision::F32 => run::<f32>(cfg, train, validation).map(|(m, r)| (TrainedModel::F32(m), r)),
        Precision::F64 => run::<f64>(cfg, train, validation).map(|(m, r)| (TrainedModel::F64(m), r)),
    }
}

/// Generates the datasets for `array` and trains both stages.
pub fn train_pipeline(cfg: &Config, array: &ArrayConfig) -> Result<(TrainedModel, PipelineReport)> {
    let (train, validation) = datasets(cfg, array)?;
    train_on(cfg, &train, &validation)
}
