//! 2-D convolution as im2col followed by a matrix product.
//!
//! Samples are processed independently and per-sample weight gradients are
//! summed in batch order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor};

use super::{gemm, PAR_THRESHOLD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square kernel `k` with "same"-style padding `k / 2`.
    pub fn square(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (stride, stride),
            padding: (k / 2, k / 2),
            has_bias: false,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        )
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().numel()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::invalid("conv2d", "zero kernel or stride"));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        }
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        Ok((oh, ow))
    }

    fn check(&self, input: Shape4, weight: Shape4, bias: Option<usize>) -> Result<(usize, usize)> {
        if weight != self.weight_shape() {
            return Err(Error::shape(
                "conv2d",
                format!("weight {weight}, expected {}", self.weight_shape()),
            ));
        }
        if input.c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, spec {}", input.c, self.in_channels),
            ));
        }
        match (self.has_bias, bias) {
            (true, Some(b)) if b == self.out_channels => {}
            (false, None) => {}
            _ => return Err(Error::shape("conv2d", "bias does not match spec")),
        }
        self.output_size(input.h, input.w)
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
    #[inline]
    fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // i = o*stride + k - pad must lie in [0, in_len)
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        let hi = if in_len + pad > k {
            ((in_len + pad - k - 1) / stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }

    /// Rows of the column matrix: one per (input channel, ky, kx).
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }
}

/// Unfolds one sample `(cin, h, w)` into `cols` of shape `(cin*kh*kw, oh*ow)`.
fn im2col<T: Scalar>(src: &[T], spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let opl = oh * ow;
    for ci in 0..spec.in_channels {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (y0, y1) = ConvSpec::valid_range(ky, ph, sh, h, oh);
            for kx in 0..kw {
                let (x0, x1) = ConvSpec::valid_range(kx, pw, sw, w, ow);
                let row = &mut cols[((ci * kh + ky) * kw + kx) * opl..][..opl];
                row.fill(T::zero());
                for oy in y0..y1 {
                    let srow = &plane[(oy * sh + ky - ph) * w..][..w];
                    let drow = &mut row[oy * ow..(oy + 1) * ow];
                    if sw == 1 {
                        let off = x0 + kx - pw;
                        drow[x0..x1].copy_from_slice(&srow[off..off + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            drow[ox] = srow[ox * sw + kx - pw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` into the sample gradient `dst`.
fn col2im<T: Scalar>(cols: &[T], spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize, dst: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let opl = oh * ow;
    for ci in 0..spec.in_channels {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (y0, y1) = ConvSpec::valid_range(ky, ph, sh, h, oh);
            for kx in 0..kw {
                let (x0, x1) = ConvSpec::valid_range(kx, pw, sw, w, ow);
                let row = &cols[((ci * kh + ky) * kw + kx) * opl..][..opl];
                for oy in y0..y1 {
                    let drow = &mut plane[(oy * sh + ky - ph) * w..][..w];
                    let srow = &row[oy * ow..(oy + 1) * ow];
                    if sw == 1 {
                        let off = x0 + kx - pw;
                        for (d, &s) in drow[off..off + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                            *d = *d + s;
                        }
                    } else {
                        for ox in x0..x1 {
                            let ix = ox * sw + kx - pw;
                            drow[ix] = drow[ix] + srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Runs `body(i, chunk, scratch)` over consecutive `len`-sized chunks, in
/// parallel when `par`. `scratch` holds `scratch_len` values owned by the
/// worker; its contents on entry are unspecified.
fn per_sample<T: Scalar, F>(data: &mut [T], len: usize, scratch_len: usize, par: bool, body: F)
where
    F: Fn(usize, &mut [T], &mut [T]) + Sync + Send,
{
    if len == 0 {
        return;
    }
    let init = || vec![T::zero(); scratch_len];
    if par {
        data.par_chunks_mut(len)
            .enumerate()
            .for_each_init(init, |scratch, (i, c)| body(i, c, scratch));
    } else {
        let mut scratch = init();
        data.chunks_mut(len)
            .enumerate()
            .for_each(|(i, c)| body(i, c, &mut scratch));
    }
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let is = input.shape();
    let (oh, ow) = spec.check(is, weight.shape(), bias.map(|b| b.len()))?;
    let os = Shape4::new(is.n, spec.out_channels, oh, ow);
    let mut out = Tensor::zeros(os);
    let cout = spec.out_channels;
    let kdim = spec.patch_len();
    let opl = oh * ow;
    let ilen = is.c * is.plane();
    let wdata = weight.data();
    let idata = input.data();
    let par = os.numel() * kdim >= PAR_THRESHOLD;

    let scratch = if spec.is_pointwise() { 0 } else { kdim * opl };
    per_sample(out.data_mut(), cout * opl, scratch, par, |n, dst, cols| {
        let src = &idata[n * ilen..(n + 1) * ilen];
        let beta = match bias {
            Some(b) => {
                for (row, &bv) in dst.chunks_mut(opl).zip(b) {
                    row.fill(bv);
                }
                T::one()
            }
            None => T::zero(),
        };
        if spec.is_pointwise() {
            gemm(cout, kdim, opl, wdata, false, src, false, beta, dst);
        } else {
            im2col(src, spec, is.h, is.w, oh, ow, cols);
            gemm(cout, kdim, opl, wdata, false, cols, false, beta, dst);
        }
    });
    out.check_finite("conv2d")?;
    Ok(out)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_masked(input, spec, weight, grad_out, true)
}

/// Backward pass; `need_input = false` skips the input gradient (graph inputs).
pub fn conv2d_backward_masked<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let is = input.shape();
    let (oh, ow) = spec.check(
        is,
        weight.shape(),
        spec.has_bias.then_some(spec.out_channels),
    )?;
    let os = Shape4::new(is.n, spec.out_channels, oh, ow);
    if grad_out.shape() != os {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad {} vs output {os}", grad_out.shape()),
        ));
    }
    let cout = spec.out_channels;
    let kdim = spec.patch_len();
    let opl = oh * ow;
    let ilen = is.c * is.plane();
    let olen = cout * opl;
    let wlen = cout * kdim;
    let idata = input.data();
    let gdata = grad_out.data();
    let wdata = weight.data();
    let par = os.numel() * kdim >= PAR_THRESHOLD;
    let pointwise = spec.is_pointwise();

    // per-sample weight gradients, reduced below in batch order
    let mut gw_parts = vec![T::zero(); is.n * wlen];
    let scratch = if pointwise { 0 } else { kdim * opl };
    per_sample(&mut gw_parts, wlen, scratch, par, |n, gw, cols| {
        let g = &gdata[n * olen..(n + 1) * olen];
        let src = &idata[n * ilen..(n + 1) * ilen];
        if pointwise {
            gemm(cout, opl, kdim, g, false, src, true, T::zero(), gw);
        } else {
            im2col(src, spec, is.h, is.w, oh, ow, cols);
            gemm(cout, opl, kdim, g, false, cols, true, T::zero(), gw);
        }
    });
    let mut gw = Tensor::zeros(spec.weight_shape());
    if wlen > 0 {
        for part in gw_parts.chunks(wlen) {
            for (d, &s) in gw.data_mut().iter_mut().zip(part) {
                *d = *d + s;
            }
        }
    }

    let mut gin = Tensor::zeros(is);
    if need_input {
        per_sample(gin.data_mut(), ilen, scratch, par, |n, dst, cols| {
            let g = &gdata[n * olen..(n + 1) * olen];
            if pointwise {
                gemm(kdim, cout, opl, wdata, true, g, false, T::zero(), dst);
            } else {
                gemm(kdim, cout, opl, wdata, true, g, false, T::zero(), cols);
                col2im(cols, spec, is.h, is.w, oh, ow, dst);
            }
        });
    }

    let gb = spec.has_bias.then(|| {
        (0..cout)
            .map(|co| {
                let mut acc = T::zero();
                for n in 0..is.n {
                    for &v in &gdata[n * olen + co * opl..n * olen + (co + 1) * opl] {
                        acc = acc + v;
                    }
                }
                acc
            })
            .collect::<Vec<T>>()
    });
    gin.check_finite("conv2d_backward")?;
    gw.check_finite("conv2d_backward")?;
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(s: Shape4) -> Tensor<f64> {
        Tensor::full(s, 1.0)
    }

    #[test]
    fn box_filter_center_and_corner() {
        let spec = ConvSpec::square(1, 1, 3, 1);
        let out = conv2d(
            &ones(Shape4::new(1, 1, 3, 3)),
            &spec,
            &ones(spec.weight_shape()),
            None,
        )
        .unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn identity_kernel() {
        let spec = ConvSpec::square(1, 1, 1, 1);
        let x = Tensor::from_fn(Shape4::new(2, 1, 3, 4), |n, _, y, x| (n * 31 + y * 7 + x) as f64 * 0.3);
        let out = conv2d(&x, &spec, &ones(spec.weight_shape()), None).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn stride_two_halves() {
        let spec = ConvSpec::square(1, 1, 3, 2);
        let out = conv2d(
            &ones(Shape4::new(1, 1, 4, 4)),
            &spec,
            &ones(spec.weight_shape()),
            None,
        )
        .unwrap();
        assert_eq!((out.shape().h, out.shape().w), (2, 2));
    }

    #[test]
    fn shape_errors() {
        let spec = ConvSpec::square(2, 1, 3, 1);
        let x = ones(Shape4::new(1, 3, 4, 4));
        assert!(conv2d(&x, &spec, &ones(spec.weight_shape()), None).is_err());
        let spec = ConvSpec {
            padding: (0, 0),
            ..ConvSpec::square(1, 1, 5, 1)
        };
        assert!(conv2d(&ones(Shape4::new(1, 1, 3, 3)), &spec, &ones(spec.weight_shape()), None).is_err());
        let spec = ConvSpec::square(1, 1, 3, 1).with_bias(true);
        assert!(conv2d(&ones(Shape4::new(1, 1, 3, 3)), &spec, &ones(spec.weight_shape()), None).is_err());
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for k in 0..5 {
            for pad in 0..3 {
                for stride in 1..4 {
                    for in_len in 1..9 {
                        if in_len + 2 * pad < 5 {
                            continue;
                        }
                        let out_len = (in_len + 2 * pad - 5) / stride + 1;
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && (i as usize) < in_len
                            })
                            .collect();
                        let (lo, hi) = ConvSpec::valid_range(k, pad, stride, in_len, out_len);
                        assert_eq!(brute, (lo..hi).collect::<Vec<_>>(), "k{k} p{pad} s{stride} n{in_len}");
                    }
                }
            }
        }
    }
}
