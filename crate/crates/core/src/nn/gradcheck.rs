use rand::seq::index::sample;

use crate::error::Result;
use crate::rng::rng_from_seed;

use super::loss::{bce_loss, mse_loss};
use super::{Mode, Sequential, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Bce,
}

impl LossKind {
    pub fn eval(self, pred: &Tensor<f64>, target: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        match self {
            LossKind::Mse => mse_loss(pred, target),
            LossKind::Bce => bce_loss(pred, target),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per tensor; `None` probes all of them.
    pub max_coords: Option<usize>,
    /// Seed for picking sampled coordinates.
    pub seed: u64,
    /// Denominator floor relative to the largest analytic gradient entry
    /// anywhere in the model (input included).
    pub relative_floor: f64,
    /// Absolute denominator floor.
    pub absolute_floor: f64,
    pub mode: Mode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            relative_floor: 1e-3,
            absolute_floor: 1e-8,
            mode: Mode::Train,
        }
    }
}

/// Result for one checked tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    /// `"input"` or `"<layer index>.<layer name>.<param index>"`.
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

/// Compares back-propagated gradients of `loss(model(input), target)` with
/// central finite differences, for every parameter tensor and the input.
/// The model is not modified. Dropout masks are replayed identically in
/// every evaluation.
pub fn grad_check(
    model: &Sequential<f64>,
    loss: LossKind,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let base = model.clone();
    let rng_state = base.dropout_state();
    let eval = |m: &mut Sequential<f64>, x: &Tensor<f64>| -> Result<f64> {
        m.set_dropout_state(&rng_state);
        let y = m.forward(x, cfg.mode)?;
        Ok(loss.eval(&y, target)?.0)
    };

    let mut m = base.clone();
    m.zero_grad();
    m.set_dropout_state(&rng_state);
    let y = m.forward(input, cfg.mode)?;
    let (loss_value, gy) = loss.eval(&y, target)?;
    let g_input = m.backward(&gy)?;
    let analytic: Vec<Vec<f64>> = m.params().iter().map(|p| p.grad.data.clone()).collect();
    let peak = analytic
        .iter()
        .chain(std::iter::once(&g_input.data))
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (cfg.relative_floor * peak).max(cfg.absolute_floor);

    let mut pick = rng_from_seed(cfg.seed);
    let mut coords = |n: usize| -> Vec<usize> {
        match cfg.max_coords {
            Some(c) if c < n => {
                let mut v = sample(&mut pick, n, c).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        }
    };

    let mut tensors = Vec::new();

    let idx = coords(input.len());
    let mut numeric = Vec::with_capacity(idx.len());
    let mut probe = base.clone();
    for &i in &idx {
        let mut xp = input.clone();
        xp.data[i] += cfg.step;
        let lp = eval(&mut probe, &xp)?;
        xp.data[i] -= 2.0 * cfg.step;
        let lm = eval(&mut probe, &xp)?;
        numeric.push((lp - lm) / (2.0 * cfg.step));
    }
    tensors.push(compare("input".into(), &g_input.data, &idx, &numeric, floor));

    let mut names = Vec::new();
    for (li, layer) in base.layers.iter().enumerate() {
        for pi in 0..layer.params().len() {
            names.push(format!("{li}.{}.{pi}", layer.spec().name()));
        }
    }
    for (t, name) in names.into_iter().enumerate() {
        let idx = coords(analytic[t].len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = probe.params_mut()[t].value.data[i];
            probe.params_mut()[t].value.data[i] = orig + cfg.step;
            let lp = eval(&mut probe, input)?;
            probe.params_mut()[t].value.data[i] = orig - cfg.step;
            let lm = eval(&mut probe, input)?;
            probe.params_mut()[t].value.data[i] = orig;
            numeric.push((lp - lm) / (2.0 * cfg.step));
        }
        tensors.push(compare(name, &analytic[t], &idx, &numeric, floor));
    }
    Ok(GradCheckReport { loss: loss_value, tensors })
}

fn compare(name: String, analytic: &[f64], idx: &[usize], numeric: &[f64], floor: f64) -> TensorCheck {
    let mut max_rel_err = 0.0f64;
    let mut max_abs_err = 0.0f64;
    for (&i, &n) in idx.iter().zip(numeric) {
        let a = analytic[i];
        let err = (a - n).abs();
        max_abs_err = max_abs_err.max(err);
        max_rel_err = max_rel_err.max(err / a.abs().max(n.abs()).max(floor));
    }
    TensorCheck { name, checked: idx.len(), max_rel_err, max_abs_err }
}
