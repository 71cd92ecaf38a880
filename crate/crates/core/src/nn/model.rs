use crate::error::{domain, shape, Result};
use crate::rng::{derive_seed, stream, SimRng};

use super::layers::{Layer, LayerSpec, Param};
use super::{Mode, Scalar, Tensor};

/// `θ ← θ - lr·g` for every parameter. `lr = 0` is accepted and leaves the
/// parameters unchanged.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return domain(format!("learning rate {lr} must be finite and non-negative"));
    }
    for p in params.iter() {
        if p.value.shape != p.grad.shape {
            return shape(format!("parameter {:?} vs gradient {:?}", p.value.shape, p.grad.shape));
        }
    }
    let lr = T::of(lr);
    for p in params.iter_mut() {
        for (v, &g) in p.value.data.iter_mut().zip(&p.grad.data) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// A feed-forward chain of layers with a fixed per-item input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
    seed: u64,
}

impl<T: Scalar> Sequential<T> {
    /// Builds the chain, checking the shape algebra. Layer `i` draws its
    /// weights from `derive_seed(seed, INIT, i)` and its dropout mask from
    /// `derive_seed(seed, DROPOUT, i)`.
    pub fn new(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Self> {
        check_specs(specs, input_shape)?;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.build(derive_seed(seed, stream::INIT, i as u64), derive_seed(seed, stream::DROPOUT, i as u64))
            })
            .collect::<Result<_>>()?;
        Ok(Sequential { layers, input_shape: input_shape.to_vec(), seed })
    }

    /// Assembles a model from already-built layers (checkpoint loading).
    pub fn from_layers(layers: Vec<Layer<T>>, input_shape: &[usize], seed: u64) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(Layer::spec).collect();
        check_specs(&specs, input_shape)?;
        Ok(Sequential { layers, input_shape: input_shape.to_vec(), seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        check_specs(&self.specs(), &self.input_shape).expect("validated at construction")
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape.len() != self.input_shape.len() + 1 || x.shape[1..] != self.input_shape[..] {
            return shape(format!("model expects [N, {:?}], got {:?}", self.input_shape, x.shape));
        }
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Eval-mode forward pass on a scratch copy; leaves `self` untouched.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.clone().forward(x, Mode::Eval)
    }

    /// Back-propagates `gy` and accumulates parameter gradients. Returns the
    /// gradient with respect to the model input.
    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = gy.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.data.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        sgd_step(&mut self.params_mut(), lr)
    }

    /// Dropout generator states, in layer order.
    pub fn dropout_state(&self) -> Vec<SimRng> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dropout(d) => Some(d.rng.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn set_dropout_state(&mut self, state: &[SimRng]) {
        let mut it = state.iter();
        for l in &mut self.layers {
            if let Layer::Dropout(d) = l {
                if let Some(r) = it.next() {
                    d.rng = r.clone();
                }
            }
        }
    }

    /// Same architecture and parameters in another precision. Caches are
    /// dropped.
    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut out: Layer<U> = l
                    .spec()
                    .build(0, derive_seed(self.seed, stream::DROPOUT, i as u64))
                    .expect("spec of a built layer");
                copy_params(l, &mut out);
                out
            })
            .collect();
        Sequential { layers, input_shape: self.input_shape.clone(), seed: self.seed }
    }

    /// Splits into the layers before `index` and the rest.
    pub fn split_at(&self, index: usize) -> Result<(Sequential<T>, Sequential<T>)> {
        if index > self.layers.len() {
            return shape(format!("split index {index} beyond {} layers", self.layers.len()));
        }
        let specs = self.specs();
        let mid = check_specs(&specs[..index], &self.input_shape)?;
        let head = Sequential::from_layers(self.layers[..index].to_vec(), &self.input_shape, self.seed)?;
        let tail = Sequential::from_layers(self.layers[index..].to_vec(), &mid, self.seed)?;
        Ok((head, tail))
    }

    /// Concatenates two chains whose shapes line up.
    pub fn chain(&self, next: &Sequential<T>) -> Result<Sequential<T>> {
        if self.output_shape() != next.input_shape {
            return shape(format!("cannot chain {:?} into {:?}", self.output_shape(), next.input_shape));
        }
        let mut layers = self.layers.clone();
        layers.extend(next.layers.iter().cloned());
        Sequential::from_layers(layers, &self.input_shape, self.seed)
    }
}

pub(crate) fn copy_params<T: Scalar, U: Scalar>(from: &Layer<T>, to: &mut Layer<U>) {
    for (src, dst) in from.params().into_iter().zip(to.params_mut()) {
        dst.value = src.value.cast();
    }
    if let (Layer::BatchNorm2d(a), Layer::BatchNorm2d(b)) = (from, to) {
        b.running_mean = a.running_mean.cast();
        b.running_var = a.running_var.cast();
    }
}

/// Runs the shape algebra and returns the final per-item shape.
pub(crate) fn check_specs(specs: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<usize>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return shape(format!("invalid model input shape {input_shape:?}"));
    }
    specs.iter().try_fold(input_shape.to_vec(), |s, spec| spec.output_shape(&s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::mse_loss;

    fn small() -> Sequential<f64> {
        let specs = [
            LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::BatchNorm2d { channels: 3 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 48, outputs: 5 },
            LayerSpec::Dropout { rate: 0.2 },
            LayerSpec::Sigmoid,
        ];
        Sequential::new(&specs, &[2, 4, 4], 9).unwrap()
    }

    #[test]
    fn sgd_definition() {
        let mut p = Param::new(Tensor::from_vec(&[1], vec![1.0f64]).unwrap());
        p.grad.data[0] = 2.0;
        sgd_step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value.data[0] - 0.8).abs() < 1e-15);
        p.grad.data[0] = 0.0;
        sgd_step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value.data[0] - 0.8).abs() < 1e-15);
        assert!(sgd_step(&mut [&mut p], -0.1).is_err());
        assert!(sgd_step(&mut [&mut p], f64::NAN).is_err());
    }

    #[test]
    fn shape_algebra_rejects_mismatch() {
        let bad = [LayerSpec::Flatten, LayerSpec::Dense { inputs: 10, outputs: 2 }];
        assert!(Sequential::<f64>::new(&bad, &[2, 4, 4], 0).is_err());
        let m = small();
        assert_eq!(m.output_shape(), vec![5]);
        assert!(m.clone().forward(&Tensor::zeros(&[2, 2, 5, 5]), Mode::Eval).is_err());
    }

    #[test]
    fn deterministic_construction_and_training() {
        let x = Tensor::<f64>::from_vec(&[3, 2, 4, 4], (0..96).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let t = Tensor::<f64>::from_vec(&[3, 5], (0..15).map(|i| (i % 2) as f64).collect()).unwrap();
        let run = || {
            let mut m = small();
            for _ in 0..3 {
                m.zero_grad();
                let y = m.forward(&x, Mode::Train).unwrap();
                let (_, g) = mse_loss(&y, &t).unwrap();
                m.backward(&g).unwrap();
                m.sgd_step(0.1).unwrap();
            }
            m
        };
        assert_eq!(run(), run());
        assert_ne!(run().params()[0].value, small().params()[0].value);
    }

    #[test]
    fn infer_is_pure_and_repeatable() {
        let m = small();
        let x = Tensor::<f64>::from_vec(&[1, 2, 4, 4], (0..32).map(|i| i as f64 / 10.0).collect()).unwrap();
        let a = m.infer(&x).unwrap();
        assert_eq!(a, m.infer(&x).unwrap());
        assert_eq!(m, small());
        assert!(a.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn cast_split_and_chain() {
        let m = small();
        let x = Tensor::<f64>::from_vec(&[1, 2, 4, 4], (0..32).map(|i| (i as f64).cos()).collect()).unwrap();
        let y = m.infer(&x).unwrap();
        let y32 = m.cast::<f32>().infer(&x.cast()).unwrap();
        for (a, b) in y.data.iter().zip(&y32.data) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
        let (head, tail) = m.split_at(3).unwrap();
        assert_eq!(tail.input_shape(), &[3, 4, 4]);
        assert_eq!(tail.infer(&head.infer(&x).unwrap()).unwrap(), y);
        assert_eq!(head.chain(&tail).unwrap().infer(&x).unwrap(), y);
        assert!(tail.chain(&head).is_err());
    }
}
