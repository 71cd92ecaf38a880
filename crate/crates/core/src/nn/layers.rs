use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, shape, Error, Result};
use crate::rng::{rng_from_seed, SimRng};

use super::kernels::{
    conv2d_output_size, conv_backward_input, conv_backward_weight, conv_forward,
    conv_transpose2d_output_size, ConvGeom,
};
use super::{Mode, Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Fraction of the running statistics kept at each training step.
pub const BN_MOMENTUM: f64 = 0.9;

/// Architecture of one layer, independent of its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    ConvTranspose2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm2d { channels: usize },
    Relu,
    Sigmoid,
    Dense { inputs: usize, outputs: usize },
    Dropout { rate: f64 },
    Flatten,
}

impl LayerSpec {
    /// Per-item output shape (no batch dimension) for a per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
                let [c, h, w] = image_shape(input)?;
                if c != in_ch {
                    return shape(format!("conv expects {in_ch} channels, got {c}"));
                }
                Ok(vec![
                    out_ch,
                    conv2d_output_size(h, kernel, stride, padding)?,
                    conv2d_output_size(w, kernel, stride, padding)?,
                ])
            }
            LayerSpec::ConvTranspose2d { in_ch, out_ch, kernel, stride, padding } => {
                let [c, h, w] = image_shape(input)?;
                if c != in_ch {
                    return shape(format!("transposed conv expects {in_ch} channels, got {c}"));
                }
                Ok(vec![
                    out_ch,
                    conv_transpose2d_output_size(h, kernel, stride, padding)?,
                    conv_transpose2d_output_size(w, kernel, stride, padding)?,
                ])
            }
            LayerSpec::BatchNorm2d { channels } => {
                let [c, _, _] = image_shape(input)?;
                if c != channels {
                    return shape(format!("batchnorm over {channels} channels, got {c}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return shape(format!("dense expects [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ConvTranspose2d { .. } => "conv_transpose2d",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Instantiates the layer. Weights are N(0, 2/fan_in), biases zero.
    pub fn build<T: Scalar>(&self, init_seed: u64, dropout_seed: u64) -> Result<Layer<T>> {
        let mut rng = rng_from_seed(init_seed);
        Ok(match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
                check_conv(in_ch, out_ch, kernel, stride)?;
                let weight = kaiming(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, &mut rng);
                Layer::Conv2d(Conv2d {
                    weight: Param::new(weight),
                    bias: Param::new(Tensor::zeros(&[out_ch])),
                    stride,
                    padding,
                    input: None,
                })
            }
            LayerSpec::ConvTranspose2d { in_ch, out_ch, kernel, stride, padding } => {
                check_conv(in_ch, out_ch, kernel, stride)?;
                let weight = kaiming(&[in_ch, out_ch, kernel, kernel], in_ch * kernel * kernel, &mut rng);
                Layer::ConvTranspose2d(ConvTranspose2d {
                    weight: Param::new(weight),
                    bias: Param::new(Tensor::zeros(&[out_ch])),
                    stride,
                    padding,
                    input: None,
                })
            }
            LayerSpec::BatchNorm2d { channels } => Layer::BatchNorm2d(BatchNorm2d::new(channels)),
            LayerSpec::Relu => Layer::Relu { mask: None },
            LayerSpec::Sigmoid => Layer::Sigmoid { output: None },
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return shape("dense layer needs nonzero width");
                }
                Layer::Dense(Dense {
                    weight: Param::new(kaiming(&[outputs, inputs], inputs, &mut rng)),
                    bias: Param::new(Tensor::zeros(&[outputs])),
                    input: None,
                })
            }
            LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(rate, dropout_seed)?),
            LayerSpec::Flatten => Layer::Flatten { input_shape: None },
        })
    }
}

fn check_conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<()> {
    if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
        return shape("convolution needs nonzero channels, kernel and stride");
    }
    Ok(())
}

fn image_shape(s: &[usize]) -> Result<[usize; 3]> {
    match *s {
        [c, h, w] => Ok([c, h, w]),
        _ => shape(format!("expected a [C, H, W] item, got {s:?}")),
    }
}

fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut SimRng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor { shape: shape.to_vec(), data }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(&value.shape);
        Param { value, grad }
    }
}

fn no_cache<T>(layer: &str) -> Result<T> {
    Err(Error::Shape(format!("{layer}: backward without a matching forward")))
}

fn image_dims(x: &Tensor<impl Scalar>, layer: &str) -> Result<[usize; 4]> {
    match *x.shape.as_slice() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => shape(format!("{layer}: expected [N, C, H, W], got {:?}", x.shape)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `[out, in, k, k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        if weight.shape.len() != 4 || weight.shape[2] != weight.shape[3] || bias.shape != [weight.shape[0]] {
            return shape("conv weight must be [out, in, k, k] with bias [out]");
        }
        Ok(Conv2d { weight: Param::new(weight), bias: Param::new(bias), stride, padding, input: None })
    }

    fn geom(&self, x: &Tensor<T>) -> Result<ConvGeom> {
        let [n, c, h, w] = image_dims(x, "conv2d")?;
        let ws = &self.weight.value.shape;
        if c != ws[1] {
            return shape(format!("conv2d expects {} input channels, got {c}", ws[1]));
        }
        Ok(ConvGeom {
            batch: n,
            in_ch: c,
            out_ch: ws[0],
            in_h: h,
            in_w: w,
            out_h: conv2d_output_size(h, ws[2], self.stride, self.padding)?,
            out_w: conv2d_output_size(w, ws[2], self.stride, self.padding)?,
            kernel: ws[2],
            stride: self.stride,
            padding: self.padding,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geom(x)?;
        let mut y = Tensor::zeros(&[g.batch, g.out_ch, g.out_h, g.out_w]);
        add_channel_bias(&mut y.data, &self.bias.value.data, g.out_h * g.out_w);
        conv_forward(&g, &x.data, &self.weight.value.data, &mut y.data);
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let Some(x) = &self.input else { return no_cache("conv2d") };
        let g = self.geom(x)?;
        if gy.shape != [g.batch, g.out_ch, g.out_h, g.out_w] {
            return shape(format!("conv2d: stale cache, gradient shape {:?}", gy.shape));
        }
        let mut gx = Tensor::zeros(&x.shape);
        conv_backward_input(&g, &gy.data, &self.weight.value.data, &mut gx.data);
        conv_backward_weight(&g, &x.data, &gy.data, &mut self.weight.grad.data);
        sum_channel(&gy.data, &mut self.bias.grad.data, g.out_h * g.out_w);
        Ok(gx)
    }
}

/// Transposed convolution: the adjoint of [`Conv2d`] with the same kernel,
/// stride and padding. Weight layout is `[in, out, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        if weight.shape.len() != 4 || weight.shape[2] != weight.shape[3] || bias.shape != [weight.shape[1]] {
            return shape("transposed conv weight must be [in, out, k, k] with bias [out]");
        }
        Ok(ConvTranspose2d { weight: Param::new(weight), bias: Param::new(bias), stride, padding, input: None })
    }

    /// Geometry of the underlying forward convolution (output → input).
    fn geom(&self, x: &Tensor<T>) -> Result<ConvGeom> {
        let [n, c, h, w] = image_dims(x, "conv_transpose2d")?;
        let ws = &self.weight.value.shape;
        if c != ws[0] {
            return shape(format!("conv_transpose2d expects {} input channels, got {c}", ws[0]));
        }
        Ok(ConvGeom {
            batch: n,
            in_ch: ws[1],
            out_ch: c,
            in_h: conv_transpose2d_output_size(h, ws[2], self.stride, self.padding)?,
            in_w: conv_transpose2d_output_size(w, ws[2], self.stride, self.padding)?,
            out_h: h,
            out_w: w,
            kernel: ws[2],
            stride: self.stride,
            padding: self.padding,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geom(x)?;
        let mut y = Tensor::zeros(&[g.batch, g.in_ch, g.in_h, g.in_w]);
        add_channel_bias(&mut y.data, &self.bias.value.data, g.in_h * g.in_w);
        conv_backward_input(&g, &x.data, &self.weight.value.data, &mut y.data);
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let Some(x) = &self.input else { return no_cache("conv_transpose2d") };
        let g = self.geom(x)?;
        if gy.shape != [g.batch, g.in_ch, g.in_h, g.in_w] {
            return shape(format!("conv_transpose2d: stale cache, gradient shape {:?}", gy.shape));
        }
        let mut gx = Tensor::zeros(&x.shape);
        conv_forward(&g, &gy.data, &self.weight.value.data, &mut gx.data);
        conv_backward_weight(&g, &gy.data, &x.data, &mut self.weight.grad.data);
        sum_channel(&gy.data, &mut self.bias.grad.data, g.in_h * g.in_w);
        Ok(gx)
    }
}

fn add_channel_bias<T: Scalar>(y: &mut [T], bias: &[T], plane: usize) {
    let ch = bias.len();
    for (i, block) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % ch];
        block.iter_mut().for_each(|v| *v = b);
    }
}

fn sum_channel<T: Scalar>(gy: &[T], gb: &mut [T], plane: usize) {
    let ch = gb.len();
    for (i, block) in gy.chunks(plane).enumerate() {
        gb[i % ch] += block.iter().copied().sum::<T>();
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    mode: Mode,
}

/// Per-channel batch normalisation over (N, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::from_vec(&[channels], vec![T::one(); channels]).expect("shape")),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![T::one(); channels]).expect("shape"),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    #[allow(clippy::needless_range_loop)]
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, h, w] = image_dims(x, "batchnorm2d")?;
        if c != self.channels() {
            return shape(format!("batchnorm2d over {} channels, got {c}", self.channels()));
        }
        if mode == Mode::Train && n < 2 {
            return domain("batchnorm2d needs a batch of at least 2 in training mode");
        }
        let plane = h * w;
        let count = T::of((n * plane) as f64);
        let eps = T::of(BN_EPSILON);
        let mut x_hat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut y = Tensor::zeros(&x.shape);
        for ch in 0..c {
            let blocks = (0..n).map(|b| (b * c + ch) * plane);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = T::zero();
                    for s in blocks.clone() {
                        sum += x.data[s..s + plane].iter().copied().sum::<T>();
                    }
                    let mean = sum / count;
                    let mut sq = T::zero();
                    for s in blocks.clone() {
                        sq += x.data[s..s + plane].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                    }
                    let var = sq / count;
                    let m = T::of(BN_MOMENTUM);
                    let unbiased = if n * plane > 1 { sq / (count - T::one()) } else { var };
                    self.running_mean.data[ch] = m * self.running_mean.data[ch] + (T::one() - m) * mean;
                    self.running_var.data[ch] = m * self.running_var.data[ch] + (T::one() - m) * unbiased;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean.data[ch], self.running_var.data[ch]),
            };
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            let (gm, bt) = (self.gamma.value.data[ch], self.beta.value.data[ch]);
            for s in blocks {
                for i in s..s + plane {
                    let xh = (x.data[i] - mean) * istd;
                    x_hat[i] = xh;
                    y.data[i] = gm * xh + bt;
                }
            }
        }
        self.cache = Some(BnCache { x_hat, inv_std, shape: x.shape.clone(), mode });
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let Some(cache) = &self.cache else { return no_cache("batchnorm2d") };
        if gy.shape != cache.shape {
            return shape(format!("batchnorm2d: stale cache, gradient shape {:?}", gy.shape));
        }
        let [n, c, h, w] = [cache.shape[0], cache.shape[1], cache.shape[2], cache.shape[3]];
        let plane = h * w;
        let count = T::of((n * plane) as f64);
        let mut gx = Tensor::zeros(&gy.shape);
        for ch in 0..c {
            let blocks: Vec<usize> = (0..n).map(|b| (b * c + ch) * plane).collect();
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for &s in &blocks {
                for i in s..s + plane {
                    sum_g += gy.data[i];
                    sum_gx += gy.data[i] * cache.x_hat[i];
                }
            }
            self.beta.grad.data[ch] += sum_g;
            self.gamma.grad.data[ch] += sum_gx;
            let scale = self.gamma.value.data[ch] * cache.inv_std[ch];
            for &s in &blocks {
                for i in s..s + plane {
                    gx.data[i] = match cache.mode {
                        Mode::Train => {
                            scale * (gy.data[i] - sum_g / count - cache.x_hat[i] * sum_gx / count)
                        }
                        Mode::Eval => scale * gy.data[i],
                    };
                }
            }
        }
        Ok(gx)
    }
}

/// Affine map `y = x Wᵀ + b` on `[N, in]` batches. Weight is `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.shape.len() != 2 || bias.shape != [weight.shape[0]] {
            return shape("dense weight must be [out, in] with bias [out]");
        }
        Ok(Dense { weight: Param::new(weight), bias: Param::new(bias), input: None })
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.value.shape[0], self.weight.value.shape[1])
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, inp) = self.dims();
        if x.shape.len() != 2 || x.shape[1] != inp {
            return shape(format!("dense expects [N, {inp}], got {:?}", x.shape));
        }
        let n = x.shape[0];
        let mut y = Tensor::zeros(&[n, out]);
        let wd = &self.weight.value.data;
        for b in 0..n {
            let xr = &x.data[b * inp..][..inp];
            for (o, yv) in y.data[b * out..][..out].iter_mut().enumerate() {
                let wr = &wd[o * inp..][..inp];
                *yv = self.bias.value.data[o] + wr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let Some(x) = &self.input else { return no_cache("dense") };
        let (out, inp) = self.dims();
        let n = x.shape[0];
        if gy.shape != [n, out] {
            return shape(format!("dense: stale cache, gradient shape {:?}", gy.shape));
        }
        let mut gx = Tensor::zeros(&x.shape);
        let wd = &self.weight.value.data;
        let gw = &mut self.weight.grad.data;
        for b in 0..n {
            let xr = &x.data[b * inp..][..inp];
            let gxr = &mut gx.data[b * inp..][..inp];
            for o in 0..out {
                let g = gy.data[b * out + o];
                if g == T::zero() {
                    continue;
                }
                self.bias.grad.data[o] += g;
                let wr = &wd[o * inp..][..inp];
                let gwr = &mut gw[o * inp..][..inp];
                for i in 0..inp {
                    gxr[i] += g * wr[i];
                    gwr[i] += g * xr[i];
                }
            }
        }
        Ok(gx)
    }
}

/// Inverted dropout: survivors are scaled by 1/(1-rate) in training, eval is
/// the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropout<T> {
    pub rate: f64,
    pub rng: SimRng,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return domain(format!("dropout rate {rate} outside [0, 1)"));
        }
        Ok(Dropout { rate, rng: rng_from_seed(seed), mask: None })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if self.rng.random::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        let y = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        };
        self.mask = Some(mask);
        y
    }

    pub fn backward(&self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.mask {
            None => Ok(gy.clone()),
            Some(m) if m.len() == gy.len() => Ok(Tensor {
                shape: gy.shape.clone(),
                data: gy.data.iter().zip(m).map(|(&g, &k)| g * k).collect(),
            }),
            Some(_) => shape("dropout: stale cache"),
        }
    }
}

/// Stand-alone dropout with its own seeded stream.
pub fn dropout<T: Scalar>(x: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<Tensor<T>> {
    Ok(Dropout::new(rate, seed)?.forward(x, mode))
}

/// One network layer with its forward cache.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    ConvTranspose2d(ConvTranspose2d<T>),
    BatchNorm2d(BatchNorm2d<T>),
    Relu { mask: Option<Vec<bool>> },
    Sigmoid { output: Option<Tensor<T>> },
    Dense(Dense<T>),
    Dropout(Dropout<T>),
    Flatten { input_shape: Option<Vec<usize>> },
}

impl<T: Scalar> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(l) => {
                let s = &l.weight.value.shape;
                LayerSpec::Conv2d { in_ch: s[1], out_ch: s[0], kernel: s[2], stride: l.stride, padding: l.padding }
            }
            Layer::ConvTranspose2d(l) => {
                let s = &l.weight.value.shape;
                LayerSpec::ConvTranspose2d { in_ch: s[0], out_ch: s[1], kernel: s[2], stride: l.stride, padding: l.padding }
            }
            Layer::BatchNorm2d(l) => LayerSpec::BatchNorm2d { channels: l.channels() },
            Layer::Relu { .. } => LayerSpec::Relu,
            Layer::Sigmoid { .. } => LayerSpec::Sigmoid,
            Layer::Dense(l) => {
                let s = &l.weight.value.shape;
                LayerSpec::Dense { inputs: s[1], outputs: s[0] }
            }
            Layer::Dropout(l) => LayerSpec::Dropout { rate: l.rate },
            Layer::Flatten { .. } => LayerSpec::Flatten,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::ConvTranspose2d(l) => l.forward(x),
            Layer::BatchNorm2d(l) => l.forward(x, mode),
            Layer::Relu { mask } => {
                let m: Vec<bool> = x.data.iter().map(|&v| v > T::zero()).collect();
                let y = Tensor {
                    shape: x.shape.clone(),
                    data: x.data.iter().zip(&m).map(|(&v, &k)| if k { v } else { T::zero() }).collect(),
                };
                *mask = Some(m);
                Ok(y)
            }
            Layer::Sigmoid { output } => {
                let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
                *output = Some(y.clone());
                Ok(y)
            }
            Layer::Dense(l) => l.forward(x),
            Layer::Dropout(l) => Ok(l.forward(x, mode)),
            Layer::Flatten { input_shape } => {
                if x.shape.is_empty() {
                    return shape("flatten of a scalar");
                }
                *input_shape = Some(x.shape.clone());
                x.clone().reshaped(&[x.batch(), x.item_len()])
            }
        }
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.backward(gy),
            Layer::ConvTranspose2d(l) => l.backward(gy),
            Layer::BatchNorm2d(l) => l.backward(gy),
            Layer::Relu { mask } => {
                let Some(m) = mask else { return no_cache("relu") };
                if m.len() != gy.len() {
                    return shape("relu: stale cache");
                }
                Ok(Tensor {
                    shape: gy.shape.clone(),
                    data: gy.data.iter().zip(m.iter()).map(|(&g, &k)| if k { g } else { T::zero() }).collect(),
                })
            }
            Layer::Sigmoid { output } => {
                let Some(y) = output else { return no_cache("sigmoid") };
                y.zip_map(gy, |s, g| g * s * (T::one() - s))
            }
            Layer::Dense(l) => l.backward(gy),
            Layer::Dropout(l) => l.backward(gy),
            Layer::Flatten { input_shape } => {
                let Some(s) = input_shape else { return no_cache("flatten") };
                gy.clone().reshaped(s)
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ConvTranspose2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm2d(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::ConvTranspose2d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm2d(l) => vec![&l.gamma, &l.beta],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }
}
