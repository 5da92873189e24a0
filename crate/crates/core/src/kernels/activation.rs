use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
    out.check_finite("relu")?;
    Ok(out)
}

/// Gradient of relu given its forward *output* (positive exactly where the input was).
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape("relu_backward", "grad/output shape mismatch"));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.shape(), data)
}
