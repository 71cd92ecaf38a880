use crate::error::{domain, shape, Result};

use super::{Scalar, Tensor};

/// Predictions are clamped to [ε, 1-ε] inside the BCE.
pub const BCE_CLAMP: f64 = 1e-7;

fn check_pair<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<usize> {
    if pred.shape != target.shape {
        return shape(format!("loss: prediction {:?} vs target {:?}", pred.shape, target.shape));
    }
    if pred.is_empty() {
        return shape("loss of an empty batch");
    }
    Ok(pred.batch())
}

/// `(1/T) Σ_i ‖pred_i - target_i‖²_F` over a batch of T items, with its
/// gradient with respect to `pred`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let t = check_pair(pred, target)? as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(&pred.shape);
    let scale = T::of(2.0 / t);
    for ((g, &p), &y) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - y;
        sum += d.as_f64() * d.as_f64();
        *g = scale * d;
    }
    Ok((sum / t, grad))
}

/// Binary cross-entropy averaged over the L outputs and the batch, with its
/// gradient with respect to `pred`. Predictions must lie in [0, 1].
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(&pred.shape);
    for ((g, &p), &z) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let (p, z) = (p.as_f64(), z.as_f64());
        if !(0.0..=1.0).contains(&p) {
            return domain(format!("bce prediction {p} outside [0, 1]"));
        }
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        sum -= z * p.ln() + (1.0 - z) * (1.0 - p).ln();
        *g = T::of((p - z) / (p * (1.0 - p)) / n);
    }
    Ok((sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn mse_definition() {
        let k = 7;
        let p = t(&[1, 2, k, k], vec![1.0; 2 * k * k]);
        let z = Tensor::zeros(&[1, 2, k, k]);
        assert_eq!(mse_loss(&p, &z).unwrap().0, (2 * k * k) as f64);
        assert_eq!(mse_loss(&p, &p).unwrap().0, 0.0);
        let p = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let z = t(&[2, 2], vec![0.0, 2.0, 1.0, 5.0]);
        let (l, g) = mse_loss(&p, &z).unwrap();
        assert_eq!(l, (1.0 + 4.0 + 1.0) / 2.0);
        assert_eq!(g.data, vec![1.0, 0.0, 2.0, -1.0]);
    }

    #[test]
    fn bce_definition() {
        let p = t(&[2, 3], vec![0.5; 6]);
        let z = t(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert!((bce_loss(&p, &z).unwrap().0 - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, _) = bce_loss(&z, &z).unwrap();
        assert!(l < 1e-6);
        assert!(bce_loss(&t(&[1, 1], vec![1.5]), &t(&[1, 1], vec![1.0])).is_err());
        assert!(bce_loss(&p, &t(&[3, 2], vec![0.0; 6])).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let p0 = vec![0.2, 0.7, 0.45, 0.9, 0.05, 0.6];
        let z = t(&[2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let h = 1e-5;
        for which in 0..2 {
            let f = |v: &[f64]| {
                let p = t(&[2, 3], v.to_vec());
                if which == 0 { mse_loss(&p, &z).unwrap() } else { bce_loss(&p, &z).unwrap() }
            };
            let (_, g) = f(&p0);
            for i in 0..p0.len() {
                let mut a = p0.clone();
                let mut b = p0.clone();
                a[i] += h;
                b[i] -= h;
                let num = (f(&a).0 - f(&b).0) / (2.0 * h);
                assert!((num - g.data[i]).abs() / num.abs().max(1e-3) < 1e-7, "{which} {i}");
            }
        }
    }
}
