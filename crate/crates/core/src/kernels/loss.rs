//! Loss functions. Each returns the scalar loss and its gradient w.r.t. the prediction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// Mean negative log-softmax over the class axis, averaged over non-ignored pixels.
///
/// `labels` is laid out as `(n, h, w)` row-major.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
    ignore_index: u32,
) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    let k = s.c;
    let pl = s.plane();
    if labels.len() != s.n * pl {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for {}x{}x{}", labels.len(), s.n, s.h, s.w),
        ));
    }
    let mut count = 0usize;
    for &l in labels {
        if l == ignore_index {
            continue;
        }
        if l as usize >= k {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {l} outside [0, {k})"),
            ));
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("softmax_cross_entropy", "all pixels ignored"));
    }
    let inv = 1.0 / count as f64;
    let mut grad = Tensor::zeros(s);
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; k];
    for n in 0..s.n {
        for p in 0..pl {
            let label = labels[n * pl + p];
            if label == ignore_index {
                continue;
            }
            let base = n * k * pl + p;
            let mut mx = f64::NEG_INFINITY;
            for c in 0..k {
                mx = mx.max(logits.data()[base + c * pl].as_f64());
            }
            let mut z = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (logits.data()[base + c * pl].as_f64() - mx).exp();
                z += *pr;
            }
            let l = label as usize;
            total += z.ln() - (logits.data()[base + l * pl].as_f64() - mx);
            for (c, pr) in probs.iter().enumerate() {
                let onehot = if c == l { 1.0 } else { 0.0 };
                grad.data_mut()[base + c * pl] = T::of((pr / z - onehot) * inv);
            }
        }
    }
    let loss = total * inv;
    if T::CHECKED && !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_cross_entropy".into(),
        });
    }
    Ok((loss, grad))
}

pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{} vs {}", pred.shape(), target.shape()),
        ));
    }
    let count = pred.len().max(1) as f64;
    let mut total = 0.0;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.as_f64() - t.as_f64();
            total += d * d;
            T::of(2.0 * d / count)
        })
        .collect();
    let loss = total / count;
    if T::CHECKED && !loss.is_finite() {
        return Err(Error::NonFinite { op: "mse_loss".into() });
    }
    Ok((loss, Tensor::from_vec(pred.shape(), data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::full(Shape4::new(2, 5, 3, 3), 0.7);
        let labels = vec![1u32; 18];
        let (loss, _) = softmax_cross_entropy(&logits, &labels, 255).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_with_margin() {
        let eval = |margin: f64| {
            let logits = Tensor::<f64>::from_fn(Shape4::new(1, 3, 1, 1), |_, c, _, _| if c == 2 { margin } else { 0.0 });
            softmax_cross_entropy(&logits, &[2], 255).unwrap().0
        };
        // scalar oracle: ln(1 + 2 e^-m)
        for m in [1.0f64, 10.0] {
            assert!((eval(m) - (1.0 + 2.0 * (-m).exp()).ln()).abs() < 1e-12);
        }
        assert!(eval(10.0) < eval(1.0));
        assert!(eval(10.0) < 1e-3);
    }

    #[test]
    fn ignored_pixels_have_no_gradient() {
        let logits = Tensor::<f64>::from_fn(Shape4::new(1, 2, 1, 2), |_, c, _, x| (c + x) as f64 * 0.3);
        let (_, g) = softmax_cross_entropy(&logits, &[0, 255], 255).unwrap();
        assert_eq!(g.at(0, 0, 0, 1), 0.0);
        assert_eq!(g.at(0, 1, 0, 1), 0.0);
        assert!(g.at(0, 0, 0, 0) != 0.0);
        assert!(softmax_cross_entropy(&logits, &[255, 255], 255).is_err());
        assert!(softmax_cross_entropy(&logits, &[2, 0], 255).is_err());
    }

    #[test]
    fn mse_values() {
        let a = Tensor::<f64>::full(Shape4::new(1, 2, 2, 2), 3.0);
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        let b = Tensor::<f64>::full(Shape4::new(1, 2, 2, 2), 2.0);
        let (l, g) = mse_loss(&a, &b).unwrap();
        assert_eq!(l, 1.0);
        assert!(g.data().iter().all(|&v| v == 2.0 / 8.0));
        assert!(mse_loss(&a, &Tensor::zeros(Shape4::new(1, 1, 2, 2))).is_err());
    }
}
