//! Two-stage estimator: a convolutional denoising autoencoder (CDAE) maps
//! the normalised noisy covariance features to clean ones, then a
//! fully-connected network turns the denoised features into L per-angle
//! probabilities. The Q largest probabilities give the DOAs.
//!
//! Both networks live in one checkpoint: the CDAE layers followed by the
//! classifier, which starts at its `Flatten` layer.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{to_feature_tensor, Dataset, FeatureTensor, LabelGrid, Sample};
use crate::error::{domain, shape, Error, Result};
use crate::nn::{
    bce_loss, decode_checkpoint, encode_checkpoint, mse_loss, LayerSpec, Mode, OptimizerKind, Scalar, Sequential,
    Tensor,
};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::CMatrix;

/// Encoder blocks conv → BN → ReLU with the listed channel counts; the
/// decoder mirrors them with transposed convolutions and ends in a
/// transposed convolution to 2 channels with identity activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdaeArch {
    pub kernel: usize,
    pub channels: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
}

impl CdaeArch {
    /// Three blocks, κ = 3, G = (16, 32, 64), stride 1, same padding.
    pub fn full() -> Self {
        CdaeArch { kernel: 3, channels: vec![16, 32, 64], stride: 1, padding: 1 }
    }

    /// Narrower variant for desk-scale runs.
    pub fn toy() -> Self {
        CdaeArch { kernel: 3, channels: vec![8, 16, 16], stride: 1, padding: 1 }
    }

    /// Number of layers up to and including the code.
    pub fn encoder_len(&self) -> usize {
        3 * self.channels.len()
    }

    pub fn specs(&self) -> Result<Vec<LayerSpec>> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return domain("CDAE needs at least one encoder block with nonzero channels");
        }
        let (kernel, stride, padding) = (self.kernel, self.stride, self.padding);
        let mut specs = Vec::new();
        let mut prev = 2;
        for &c in &self.channels {
            specs.push(LayerSpec::Conv2d { in_ch: prev, out_ch: c, kernel, stride, padding });
            specs.push(LayerSpec::BatchNorm2d { channels: c });
            specs.push(LayerSpec::Relu);
            prev = c;
        }
        let mut down: Vec<usize> = self.channels.iter().rev().skip(1).copied().collect();
        down.push(2);
        for (i, &c) in down.iter().enumerate() {
            specs.push(LayerSpec::ConvTranspose2d { in_ch: prev, out_ch: c, kernel, stride, padding });
            if i + 1 < down.len() {
                specs.push(LayerSpec::BatchNorm2d { channels: c });
                specs.push(LayerSpec::Relu);
            }
            prev = c;
        }
        Ok(specs)
    }
}

/// Flatten → (dense → ReLU → dropout) per width → dense(L) → sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FcArch {
    pub widths: Vec<usize>,
    pub dropout: f64,
}

impl FcArch {
    pub fn full() -> Self {
        FcArch { widths: vec![2048, 4096, 2048], dropout: 0.2 }
    }

    pub fn toy() -> Self {
        FcArch { widths: vec![256, 256], dropout: 0.2 }
    }

    pub fn specs(&self, k: usize, outputs: usize) -> Result<Vec<LayerSpec>> {
        if k == 0 || outputs == 0 || self.widths.contains(&0) {
            return domain("FC network needs nonzero widths");
        }
        let mut specs = vec![LayerSpec::Flatten];
        let mut prev = 2 * k * k;
        for &w in &self.widths {
            specs.push(LayerSpec::Dense { inputs: prev, outputs: w });
            specs.push(LayerSpec::Relu);
            if self.dropout > 0.0 {
                specs.push(LayerSpec::Dropout { rate: self.dropout });
            }
            prev = w;
        }
        specs.push(LayerSpec::Dense { inputs: prev, outputs });
        specs.push(LayerSpec::Sigmoid);
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Extra epochs run at `lr / 10` after the first `epochs`.
    pub decay_epochs: usize,
    pub optimizer: OptimizerKind,
    /// Seeds the minibatch shuffles.
    pub seed: u64,
}

impl TrainHyper {
    /// Batch 1000, 30 epochs, learning rate 0.1.
    pub fn full() -> Self {
        TrainHyper { batch_size: 1000, epochs: 30, lr: 0.1, decay_epochs: 0, optimizer: OptimizerKind::Sgd, seed: 0 }
    }

    /// Desk-scale CDAE schedule: Adam, batch 16, 400 + 60 epochs from 2e-3.
    pub fn toy_cdae() -> Self {
        TrainHyper { batch_size: 16, epochs: 400, lr: 2e-3, decay_epochs: 60, optimizer: OptimizerKind::Adam, seed: 0 }
    }

    /// Desk-scale classifier schedule: SGD, batch 16, 100 epochs at 2.0.
    pub fn toy_fc() -> Self {
        TrainHyper { batch_size: 16, epochs: 100, lr: 2.0, decay_epochs: 0, optimizer: OptimizerKind::Sgd, seed: 0 }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.decay_epochs
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.epochs { self.lr } else { self.lr / 10.0 }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return domain("batch size must be at least 2 (batch normalisation)");
        }
        if self.epochs == 0 {
            return domain("epochs must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return domain(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub history: Vec<f64>,
    /// Training loss of the untrained model on the full training set.
    pub initial_loss: f64,
    pub hyper: TrainHyper,
    /// Loss on the validation set after training, if one was given.
    pub validation_loss: Option<f64>,
}

pub fn build_cdae<T: Scalar>(arch: &CdaeArch, k: usize, seed: u64) -> Result<Sequential<T>> {
    let model = Sequential::new(&arch.specs()?, &[2, k, k], seed)?;
    if model.output_shape() != [2, k, k] {
        return shape(format!("CDAE maps [2, {k}, {k}] to {:?}", model.output_shape()));
    }
    Ok(model)
}

pub fn build_fc<T: Scalar>(arch: &FcArch, k: usize, outputs: usize, seed: u64) -> Result<Sequential<T>> {
    Sequential::new(&arch.specs(k, outputs)?, &[2, k, k], seed)
}

fn feature_batch<T: Scalar>(items: &[&FeatureTensor]) -> Tensor<T> {
    let k = items[0].k;
    let data = items.iter().flat_map(|f| f.data.iter().map(|&v| T::of(v))).collect();
    Tensor { shape: vec![items.len(), 2, k, k], data }
}

fn label_batch<T: Scalar>(samples: &[&Sample]) -> Tensor<T> {
    let l = samples[0].label.z.len();
    let data = samples.iter().flat_map(|s| s.label.z.iter().map(|&b| T::of(b as f64))).collect();
    Tensor { shape: vec![samples.len(), l], data }
}

fn check_dataset(ds: &Dataset, k: usize) -> Result<()> {
    if ds.is_empty() {
        return domain("empty dataset");
    }
    if ds.samples.iter().any(|s| s.noisy.k != k) {
        return shape(format!("dataset features are not {k}x{k}"));
    }
    Ok(())
}

/// Batches of sample indices for one epoch; a trailing batch of one is
/// merged into the previous batch.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, stream::SHUFFLE, epoch as u64)));
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

type LossFn<T> = fn(&Tensor<T>, &Tensor<T>) -> Result<(f64, Tensor<T>)>;

/// Minibatch training over pre-built input/target tensors (one item each).
fn fit<T: Scalar>(
    model: &mut Sequential<T>,
    inputs: &Tensor<T>,
    targets: &Tensor<T>,
    loss: LossFn<T>,
    hyper: &TrainHyper,
) -> Result<(f64, Vec<f64>)> {
    hyper.validate()?;
    let n = inputs.batch();
    if n < 2 {
        return domain("training needs at least 2 samples");
    }
    let initial = eval_loss(model, inputs, targets, loss)?;
    let mut history = Vec::with_capacity(hyper.total_epochs());
    let mut optimizer = hyper.optimizer.build(&model.params());
    for epoch in 0..hyper.total_epochs() {
        let lr = hyper.lr_at(epoch);
        let mut total = 0.0;
        for idx in epoch_batches(n, hyper.batch_size, hyper.seed, epoch) {
            let x = gather(inputs, &idx);
            let t = gather(targets, &idx);
            model.zero_grad();
            let y = model.forward(&x, Mode::Train)?;
            let (l, g) = loss(&y, &t)?;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, loss: l });
            }
            model.backward(&g)?;
            optimizer.step(&mut model.params_mut(), lr)?;
            total += l * idx.len() as f64;
        }
        let mean = total / n as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok((initial, history))
}

fn gather<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let mut shape = t.shape.clone();
    shape[0] = idx.len();
    let data = idx.iter().flat_map(|&i| t.item(i).iter().copied()).collect();
    Tensor { shape, data }
}

const EVAL_CHUNK: usize = 256;

/// Eval-mode forward pass in chunks.
fn infer_all<T: Scalar>(model: &Sequential<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut m = model.clone();
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for start in (0..x.batch()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(x.batch())).collect();
        let y = m.forward(&gather(x, &idx), Mode::Eval)?;
        shape = y.shape.clone();
        data.extend(y.data);
    }
    shape[0] = x.batch();
    Ok(Tensor { shape, data })
}

fn eval_loss<T: Scalar>(model: &Sequential<T>, x: &Tensor<T>, t: &Tensor<T>, loss: LossFn<T>) -> Result<f64> {
    loss(&infer_all(model, x)?, t).map(|r| r.0)
}

/// Fits the CDAE to map noisy features to clean ones under the MSE loss.
pub fn train_cdae<T: Scalar>(
    model: &mut Sequential<T>,
    train: &Dataset,
    validation: Option<&Dataset>,
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    let k = model.input_shape()[1];
    check_dataset(train, k)?;
    let noisy = feature_batch(&train.samples.iter().map(|s| &s.noisy).collect::<Vec<_>>());
    let clean = feature_batch(&train.samples.iter().map(|s| &s.clean).collect::<Vec<_>>());
    let (initial_loss, history) = fit(model, &noisy, &clean, mse_loss, hyper)?;
    let validation_loss = match validation {
        Some(v) => {
            check_dataset(v, k)?;
            let x = feature_batch(&v.samples.iter().map(|s| &s.noisy).collect::<Vec<_>>());
            let t = feature_batch(&v.samples.iter().map(|s| &s.clean).collect::<Vec<_>>());
            Some(eval_loss(model, &x, &t, mse_loss)?)
        }
        None => None,
    };
    Ok(TrainReport { history, initial_loss, hyper: hyper.clone(), validation_loss })
}

/// Denoised features of a whole dataset (eval mode).
fn denoised_inputs<T: Scalar>(cdae: &Sequential<T>, ds: &Dataset) -> Result<Tensor<T>> {
    let x = feature_batch(&ds.samples.iter().map(|s| &s.noisy).collect::<Vec<_>>());
    infer_all(cdae, &x)
}

/// Fits the classifier on the frozen CDAE's outputs under the BCE loss.
pub fn train_fc<T: Scalar>(
    fc: &mut Sequential<T>,
    cdae: &Sequential<T>,
    train: &Dataset,
    validation: Option<&Dataset>,
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    let k = cdae.input_shape()[1];
    check_dataset(train, k)?;
    check_labels(fc, train)?;
    let x = denoised_inputs(cdae, train)?;
    let z = label_batch(&train.samples.iter().collect::<Vec<_>>());
    let (initial_loss, history) = fit(fc, &x, &z, bce_loss, hyper)?;
    let validation_loss = match validation {
        Some(v) => Some(validation_bce(cdae, fc, v)?),
        None => None,
    };
    Ok(TrainReport { history, initial_loss, hyper: hyper.clone(), validation_loss })
}

/// Trains CDAE and classifier together on the BCE loss.
pub fn finetune_joint<T: Scalar>(
    cdae: &mut Sequential<T>,
    fc: &mut Sequential<T>,
    train: &Dataset,
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    let k = cdae.input_shape()[1];
    check_dataset(train, k)?;
    check_labels(fc, train)?;
    let split = cdae.layers.len();
    let mut joint = cdae.chain(fc)?;
    let x = feature_batch(&train.samples.iter().map(|s| &s.noisy).collect::<Vec<_>>());
    let z = label_batch(&train.samples.iter().collect::<Vec<_>>());
    let (initial_loss, history) = fit(&mut joint, &x, &z, bce_loss, hyper)?;
    let (a, b) = joint.split_at(split)?;
    *cdae = a;
    *fc = b;
    Ok(TrainReport { history, initial_loss, hyper: hyper.clone(), validation_loss: None })
}

fn check_labels<T: Scalar>(fc: &Sequential<T>, ds: &Dataset) -> Result<()> {
    let l = fc.output_shape();
    if ds.samples.iter().any(|s| [s.label.z.len()] != l[..]) {
        return shape(format!("labels do not match the {l:?} classifier output"));
    }
    Ok(())
}

/// Mean BCE of the full estimator on `ds`.
pub fn validation_bce<T: Scalar>(cdae: &Sequential<T>, fc: &Sequential<T>, ds: &Dataset) -> Result<f64> {
    check_labels(fc, ds)?;
    let x = denoised_inputs(cdae, ds)?;
    let z = label_batch(&ds.samples.iter().collect::<Vec<_>>());
    eval_loss(fc, &x, &z, bce_loss)
}

/// One eval-mode pass of the CDAE; the normalisation factor is kept.
pub fn denoise<T: Scalar>(cdae: &Sequential<T>, x: &FeatureTensor) -> Result<FeatureTensor> {
    let y = cdae.infer(&feature_batch(&[x]))?;
    FeatureTensor::from_parts(x.k, y.to_f64(), x.norm_factor)
}

fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-sample `‖R̂ - R‖_F / ‖R̃ - R‖_F` on normalised features.
pub fn denoising_ratios<T: Scalar>(cdae: &Sequential<T>, ds: &Dataset) -> Result<Vec<f64>> {
    let y = denoised_inputs(cdae, ds)?;
    Ok(ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let out: Vec<f64> = y.item(i).iter().map(|v| v.as_f64()).collect();
            feature_distance(&out, &s.clean.data) / feature_distance(&s.noisy.data, &s.clean.data)
        })
        .collect())
}

/// Indices of the `q` largest values, ascending. Among equal values the
/// lower index wins. `ambiguous` is set when the q-th and (q+1)-th largest
/// values are equal.
pub fn select_top(z: &[f64], q: usize) -> Result<(Vec<usize>, bool)> {
    if q == 0 || q > z.len() {
        return domain(format!("cannot select {q} of {} outputs", z.len()));
    }
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let ambiguous = q < z.len() && z[order[q - 1]] == z[order[q]];
    let mut top = order[..q].to_vec();
    top.sort_unstable();
    Ok((top, ambiguous))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// ẑ, one probability per grid angle.
    pub probabilities: Vec<f64>,
    pub indices: Vec<usize>,
    /// Degrees, ascending.
    pub angles: Vec<f64>,
    pub ambiguous: bool,
}

/// Trained CDAE plus classifier over a fixed angle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CdaeDnn<T> {
    pub cdae: Sequential<T>,
    pub fc: Sequential<T>,
    pub grid: LabelGrid,
}

impl<T: Scalar> CdaeDnn<T> {
    pub fn new(cdae: Sequential<T>, fc: Sequential<T>, grid: LabelGrid) -> Result<Self> {
        let k = cdae.input_shape().get(1).copied().unwrap_or(0);
        if cdae.input_shape() != [2, k, k] || cdae.output_shape() != [2, k, k] {
            return shape("CDAE must map [2, K, K] to itself");
        }
        if fc.input_shape() != [2, k, k] || fc.output_shape() != [grid.len()] {
            return shape(format!("classifier must map [2, {k}, {k}] to [{}]", grid.len()));
        }
        Ok(CdaeDnn { cdae, fc, grid })
    }

    pub fn k(&self) -> usize {
        self.cdae.input_shape()[1]
    }

    /// ẑ for each covariance.
    pub fn probabilities(&self, covariances: &[CMatrix]) -> Result<Vec<Vec<f64>>> {
        if covariances.is_empty() {
            return Ok(Vec::new());
        }
        let k = self.k();
        let feats = covariances
            .iter()
            .map(|c| {
                if c.nrows() != k || c.ncols() != k {
                    return shape(format!("covariance is {}x{}, expected {k}x{k}", c.nrows(), c.ncols()));
                }
                to_feature_tensor(c, None)
            })
            .collect::<Result<Vec<_>>>()?;
        let x = feature_batch(&feats.iter().collect::<Vec<_>>());
        let z = infer_all(&self.fc, &infer_all(&self.cdae, &x)?)?;
        Ok((0..z.batch()).map(|i| z.item(i).iter().map(|v| v.as_f64()).collect()).collect())
    }

    pub fn predict(&self, c: &CMatrix, q: usize) -> Result<Prediction> {
        Ok(self.predict_batch(std::slice::from_ref(c), q)?.remove(0))
    }

    pub fn predict_batch(&self, covariances: &[CMatrix], q: usize) -> Result<Vec<Prediction>> {
        if q == 0 || q > self.grid.len() {
            return domain(format!("Q = {q} outside 1..={}", self.grid.len()));
        }
        self.probabilities(covariances)?
            .into_iter()
            .map(|z| self.decide(z, q))
            .collect()
    }

    /// Picks the Q largest entries of ẑ.
    pub fn decide(&self, probabilities: Vec<f64>, q: usize) -> Result<Prediction> {
        let (indices, ambiguous) = select_top(&probabilities, q)?;
        let angles = indices.iter().map(|&i| self.grid.angle(i)).collect();
        Ok(Prediction { probabilities, indices, angles, ambiguous })
    }

    /// CDAE layers followed by the classifier layers.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(encode_checkpoint(&self.cdae.chain(&self.fc)?))
    }

    pub fn from_bytes(data: &[u8], grid: LabelGrid) -> Result<Self> {
        let model: Sequential<T> = decode_checkpoint(data)?;
        let split = model
            .layers
            .iter()
            .position(|l| l.spec() == LayerSpec::Flatten)
            .ok_or_else(|| Error::Format("checkpoint has no classifier".into()))?;
        let (cdae, fc) = model.split_at(split)?;
        Self::new(cdae, fc, grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, grid: LabelGrid) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, grid)
    }
}
