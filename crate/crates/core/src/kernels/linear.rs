use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor};

/// Affine map on the flattened per-sample features.
///
/// `weight` has shape `(d_out, d, 1, 1)`; the output is `(n, d_out, 1, 1)`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let s = input.shape();
    let d = s.c * s.plane();
    let ws = weight.shape();
    if ws.c * ws.plane() != d {
        return Err(Error::shape(
            "linear",
            format!("input features {d}, weight expects {}", ws.c * ws.plane()),
        ));
    }
    let d_out = ws.n;
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(Error::shape("linear", "bias length"));
        }
    }
    let mut out = Tensor::zeros(Shape4::new(s.n, d_out, 1, 1));
    for n in 0..s.n {
        let x = &input.data()[n * d..(n + 1) * d];
        for o in 0..d_out {
            let w = &weight.data()[o * d..(o + 1) * d];
            let mut acc = bias.map_or(T::zero(), |b| b[o]);
            for (&a, &b) in x.iter().zip(w) {
                acc = acc + a * b;
            }
            out.data_mut()[n * d_out + o] = acc;
        }
    }
    out.check_finite("linear")?;
    Ok(out)
}

pub struct LinearGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let s = input.shape();
    let d = s.c * s.plane();
    let d_out = weight.shape().n;
    if grad_out.shape() != Shape4::new(s.n, d_out, 1, 1) {
        return Err(Error::shape("linear_backward", "grad shape"));
    }
    let mut gin = Tensor::zeros(s);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = vec![T::zero(); d_out];
    for n in 0..s.n {
        let x = &input.data()[n * d..(n + 1) * d];
        for o in 0..d_out {
            let g = grad_out.data()[n * d_out + o];
            gb[o] = gb[o] + g;
            let w = &weight.data()[o * d..(o + 1) * d];
            let gi = &mut gin.data_mut()[n * d..(n + 1) * d];
            for (a, &b) in gi.iter_mut().zip(w) {
                *a = *a + g * b;
            }
            let gwr = &mut gw.data_mut()[o * d..(o + 1) * d];
            for (a, &b) in gwr.iter_mut().zip(x) {
                *a = *a + g * b;
            }
        }
    }
    Ok(LinearGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecn(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape4::new(1, v.len(), 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn dot_product() {
        let w = Tensor::from_vec(Shape4::new(1, 2, 1, 1), vec![3.0, 4.0]).unwrap();
        let y = linear(&vecn(&[1.0, 2.0]), &w, Some(&[5.0])).unwrap();
        assert_eq!(y.data(), &[16.0]);
    }

    #[test]
    fn identity_and_zero_input() {
        let eye = Tensor::from_fn(Shape4::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let x = vecn(&[1.5, -2.0, 0.25]);
        assert_eq!(linear(&x, &eye, None).unwrap(), x);
        let y = linear(&vecn(&[0.0, 0.0, 0.0]), &eye, Some(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn mismatch_errors() {
        let w = Tensor::<f64>::zeros(Shape4::new(2, 3, 1, 1));
        assert!(linear(&vecn(&[1.0, 2.0]), &w, None).is_err());
    }
}
