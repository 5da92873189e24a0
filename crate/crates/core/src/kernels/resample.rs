//! Upsampling and average pooling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

impl UpsampleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Bilinear => "bilinear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nearest" => Some(UpsampleMode::Nearest),
            "bilinear" => Some(UpsampleMode::Bilinear),
            _ => None,
        }
    }
}

/// Interpolation taps for one output coordinate: (i0, i1, w0, w1).
fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

fn check_factor(factor: usize) -> Result<()> {
    if factor < 2 || !factor.is_power_of_two() {
        return Err(Error::invalid(
            "upsample",
            format!("factor {factor} is not a power of two >= 2"),
        ));
    }
    Ok(())
}

pub fn upsample<T: Scalar>(input: &Tensor<T>, factor: usize, mode: UpsampleMode) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let s = input.shape();
    let os = Shape4::new(s.n, s.c, s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(os);
    if os.numel() == 0 {
        return Ok(out);
    }
    let opl = os.plane();
    match mode {
        UpsampleMode::Nearest => {
            for (p, dst) in out.data_mut().chunks_mut(opl).enumerate() {
                let src = &input.data()[p * s.plane()..(p + 1) * s.plane()];
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        dst[oy * os.w + ox] = src[(oy / factor) * s.w + ox / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(os.h, s.h, factor);
            let tx = bilinear_taps(os.w, s.w, factor);
            for (p, dst) in out.data_mut().chunks_mut(opl).enumerate() {
                let src = &input.data()[p * s.plane()..(p + 1) * s.plane()];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                        let top = src[y0 * s.w + x0] * wx0 + src[y0 * s.w + x1] * wx1;
                        let bot = src[y1 * s.w + x0] * wx0 + src[y1 * s.w + x1] * wx1;
                        dst[oy * os.w + ox] = top * wy0 + bot * wy1;
                    }
                }
            }
        }
    }
    out.check_finite("upsample")?;
    Ok(out)
}

/// Transpose of [`upsample`].
pub fn upsample_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    factor: usize,
    mode: UpsampleMode,
) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let os = grad_out.shape();
    if !os.h.is_multiple_of(factor) || !os.w.is_multiple_of(factor) {
        return Err(Error::shape("upsample_backward", "grad not divisible by factor"));
    }
    let s = Shape4::new(os.n, os.c, os.h / factor, os.w / factor);
    let mut gin = Tensor::zeros(s);
    if s.numel() == 0 {
        return Ok(gin);
    }
    let opl = os.plane();
    let ipl = s.plane();
    match mode {
        UpsampleMode::Nearest => {
            for (p, dst) in gin.data_mut().chunks_mut(ipl).enumerate() {
                let g = &grad_out.data()[p * opl..(p + 1) * opl];
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let i = (oy / factor) * s.w + ox / factor;
                        dst[i] = dst[i] + g[oy * os.w + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(os.h, s.h, factor);
            let tx = bilinear_taps(os.w, s.w, factor);
            for (p, dst) in gin.data_mut().chunks_mut(ipl).enumerate() {
                let g = &grad_out.data()[p * opl..(p + 1) * opl];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                        let gv = g[oy * os.w + ox];
                        let gt = gv * wy0;
                        let gb = gv * wy1;
                        dst[y0 * s.w + x0] = dst[y0 * s.w + x0] + gt * wx0;
                        dst[y0 * s.w + x1] = dst[y0 * s.w + x1] + gt * wx1;
                        dst[y1 * s.w + x0] = dst[y1 * s.w + x0] + gb * wx0;
                        dst[y1 * s.w + x1] = dst[y1 * s.w + x1] + gb * wx1;
                    }
                }
            }
        }
    }
    gin.check_finite("upsample_backward")?;
    Ok(gin)
}

pub fn pool_output_size(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(usize, usize)> {
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::invalid("avg_pool", "zero kernel or stride"));
    }
    if kernel.0 > h || kernel.1 > w {
        return Err(Error::shape(
            "avg_pool",
            format!("kernel {}x{} larger than input {h}x{w}", kernel.0, kernel.1),
        ));
    }
    Ok(((h - kernel.0) / stride.0 + 1, (w - kernel.1) / stride.1 + 1))
}

pub fn avg_pool<T: Scalar>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let s = input.shape();
    let (oh, ow) = pool_output_size(s.h, s.w, kernel, stride)?;
    let os = Shape4::new(s.n, s.c, oh, ow);
    let mut out = Tensor::zeros(os);
    let area = T::from_usize(kernel.0 * kernel.1).unwrap();
    for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let src = &input.data()[p * s.plane()..(p + 1) * s.plane()];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..kernel.0 {
                    let row = (oy * stride.0 + ky) * s.w + ox * stride.1;
                    for &v in &src[row..row + kernel.1] {
                        acc = acc + v;
                    }
                }
                dst[oy * ow + ox] = acc / area;
            }
        }
    }
    out.check_finite("avg_pool")?;
    Ok(out)
}

pub fn avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: Shape4,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let (oh, ow) = pool_output_size(input_shape.h, input_shape.w, kernel, stride)?;
    let os = grad_out.shape();
    if (os.n, os.c, os.h, os.w) != (input_shape.n, input_shape.c, oh, ow) {
        return Err(Error::shape("avg_pool_backward", "grad shape mismatch"));
    }
    let mut gin = Tensor::zeros(input_shape);
    let area = T::from_usize(kernel.0 * kernel.1).unwrap();
    let ipl = input_shape.plane();
    for (p, dst) in gin.data_mut().chunks_mut(ipl).enumerate() {
        let g = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let share = g[oy * ow + ox] / area;
                for ky in 0..kernel.0 {
                    let row = (oy * stride.0 + ky) * input_shape.w + ox * stride.1;
                    for d in &mut dst[row..row + kernel.1] {
                        *d = *d + share;
                    }
                }
            }
        }
    }
    Ok(gin)
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.plane() == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let area = T::from_usize(s.plane()).unwrap();
    let data = input
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) / area)
        .collect();
    let out = Tensor::from_vec(Shape4::new(s.n, s.c, 1, 1), data)?;
    out.check_finite("global_avg_pool")?;
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: Shape4) -> Result<Tensor<T>> {
    let gs = grad_out.shape();
    if (gs.n, gs.c, gs.h, gs.w) != (input_shape.n, input_shape.c, 1, 1) {
        return Err(Error::shape("global_avg_pool_backward", "grad shape mismatch"));
    }
    let area = T::from_usize(input_shape.plane()).unwrap();
    let mut gin = Tensor::zeros(input_shape);
    for (p, dst) in gin.data_mut().chunks_mut(input_shape.plane()).enumerate() {
        let share = grad_out.data()[p] / area;
        dst.iter_mut().for_each(|d| *d = share);
    }
    Ok(gin)
}
