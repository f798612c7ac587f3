//! Forward kernels and their adjoints.
//!
//! Kernels are pure functions. Work is split across disjoint output planes
//! with rayon; each plane is reduced serially in a fixed order, so results
//! are bit-identical regardless of the worker count.

use rayon::prelude::*;

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so that stride 1 preserves H and W. When the
    /// total padding is odd the extra row/column goes bottom/right.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Resolved geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub(crate) fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (input, kernel) else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        };
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: kernel.to_vec(),
                reason: "stride must be positive".into(),
            });
        }
        let (pad_top, pad_bottom, pad_left, pad_right) = match padding {
            Padding::Valid => (0, 0, 0, 0),
            Padding::Same => {
                let (t, b) = same_pad(h, kh, stride);
                let (l, r) = same_pad(w, kw, stride);
                (t, b, l, r)
            }
        };
        let ph = h + pad_top + pad_bottom;
        let pw = w + pad_left + pad_right;
        if kh > ph || kw > pw || kh == 0 || kw == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad_left`
    /// falls inside `[0, w)`.
    #[inline]
    pub(crate) fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        valid_range(self.ow, self.w, self.stride, kx, self.pad_left)
    }

    #[inline]
    pub(crate) fn valid_rows(&self, ky: usize) -> std::ops::Range<usize> {
        valid_range(self.oh, self.h, self.stride, ky, self.pad_top)
    }
}

fn same_pad(size: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(size);
    (total / 2, total - total / 2)
}

/// Range of output positions `o` in `[0, out)` with `0 <= o*s + k - pad < size`.
#[inline]
fn valid_range(out: usize, size: usize, s: usize, k: usize, pad: usize) -> std::ops::Range<usize> {
    // o*s + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(s) };
    // o*s + k - pad <= size - 1
    let hi = if size + pad > k {
        ((size + pad - k - 1) / s + 1).min(out)
    } else {
        0
    };
    lo..hi.max(lo)
}

fn check_bias<T: Copy>(op: &'static str, bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(TensorError::ShapeMismatch {
            op,
            left: vec![channels],
            right: bias.shape().to_vec(),
        });
    }
    Ok(())
}

/// Cross-correlation of `input` (N×Cin×H×W) with `kernel` (Cout×Cin×Kh×Kw).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding)?;
    check_bias("conv2d", bias, g.cout)?;
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, o) = (idx / g.cout, idx % g.cout);
        dst.fill(b[o]);
        for i in 0..g.cin {
            let src = &x[(n * g.cin + i) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let rows = g.valid_rows(ky);
                for kx in 0..g.kw {
                    let wv = k[((o * g.cin + i) * g.kh + ky) * g.kw + kx];
                    let cols = g.valid_cols(kx);
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad_top;
                        let srow = &src[iy * g.w..][..g.w];
                        let drow = &mut dst[oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let off = kx as isize - g.pad_left as isize;
                            for ox in cols.clone() {
                                drow[ox] = drow[ox] + wv * srow[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in cols.clone() {
                                let ix = ox * g.stride + kx - g.pad_left;
                                drow[ox] = drow[ox] + wv * srow[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

/// Adjoints of [`conv2d`]: gradients w.r.t. input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding)?;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let plane = g.oh * g.ow;
    let in_plane = g.h * g.w;

    let mut gx = vec![T::zero(); x.len()];
    gx.par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (n, i) = (idx / g.cin, idx % g.cin);
            for o in 0..g.cout {
                let src = &go[(n * g.cout + o) * plane..][..plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = k[((o * g.cin + i) * g.kh + ky) * g.kw + kx];
                        let cols = g.valid_cols(kx);
                        for oy in g.valid_rows(ky) {
                            let iy = oy * g.stride + ky - g.pad_top;
                            for ox in cols.clone() {
                                let ix = ox * g.stride + kx - g.pad_left;
                                dst[iy * g.w + ix] = dst[iy * g.w + ix] + wv * src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        });

    let ksize = g.cin * g.kh * g.kw;
    let mut gk = vec![T::zero(); k.len()];
    gk.par_chunks_mut(ksize).enumerate().for_each(|(o, dst)| {
        for n in 0..g.n {
            let gsrc = &go[(n * g.cout + o) * plane..][..plane];
            for i in 0..g.cin {
                let xsrc = &x[(n * g.cin + i) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let cols = g.valid_cols(kx);
                        let mut acc = T::zero();
                        for oy in g.valid_rows(ky) {
                            let iy = oy * g.stride + ky - g.pad_top;
                            for ox in cols.clone() {
                                let ix = ox * g.stride + kx - g.pad_left;
                                acc = acc + gsrc[oy * g.ow + ox] * xsrc[iy * g.w + ix];
                            }
                        }
                        let slot = &mut dst[(i * g.kh + ky) * g.kw + kx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    });

    let gb = (0..g.cout)
        .map(|o| {
            (0..g.n)
                .map(|n| go[(n * g.cout + o) * plane..][..plane].iter().copied().sum::<T>())
                .sum()
        })
        .collect();

    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![g.cout], gb)?,
    ))
}

fn tconv_dims(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
) -> Result<([usize; 4], [usize; 4], usize, usize)> {
    let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (input, kernel) else {
        return Err(TensorError::ShapeMismatch {
            op: "transposed_conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        });
    };
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "transposed_conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidShape {
            op: "transposed_conv2d",
            shape: kernel.to_vec(),
            reason: "stride must be positive".into(),
        });
    }
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    Ok(([n, cin, h, w], [cout, cin, kh, kw], oh, ow))
}

/// Fractionally strided convolution. `kernel` is Cout×Cin×Kh×Kw; the output
/// extent is `(H-1)*stride + Kh`.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let ([n, cin, h, w], [cout, _, kh, kw], oh, ow) =
        tconv_dims(input.shape(), kernel.shape(), stride)?;
    check_bias("transposed_conv2d", bias, cout)?;
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let plane = oh * ow;
    let mut out = vec![T::zero(); n * cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (bn, o) = (idx / cout, idx % cout);
        dst.fill(b[o]);
        for i in 0..cin {
            let src = &x[(bn * cin + i) * h * w..][..h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = k[((o * cin + i) * kh + ky) * kw + kx];
                    for iy in 0..h {
                        let drow = &mut dst[(iy * stride + ky) * ow..][..ow];
                        for ix in 0..w {
                            let d = &mut drow[ix * stride + kx];
                            *d = *d + wv * src[iy * w + ix];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![n, cout, oh, ow], out)
}

pub fn transposed_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let ([n, cin, h, w], [cout, _, kh, kw], oh, ow) =
        tconv_dims(input.shape(), kernel.shape(), stride)?;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let plane = oh * ow;

    let mut gx = vec![T::zero(); x.len()];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(idx, dst)| {
        let (bn, i) = (idx / cin, idx % cin);
        for o in 0..cout {
            let src = &go[(bn * cout + o) * plane..][..plane];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = k[((o * cin + i) * kh + ky) * kw + kx];
                    for iy in 0..h {
                        let srow = &src[(iy * stride + ky) * ow..][..ow];
                        for ix in 0..w {
                            dst[iy * w + ix] = dst[iy * w + ix] + wv * srow[ix * stride + kx];
                        }
                    }
                }
            }
        }
    });

    let mut gk = vec![T::zero(); k.len()];
    gk.par_chunks_mut(cin * kh * kw)
        .enumerate()
        .for_each(|(o, dst)| {
            for bn in 0..n {
                let gsrc = &go[(bn * cout + o) * plane..][..plane];
                for i in 0..cin {
                    let xsrc = &x[(bn * cin + i) * h * w..][..h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = T::zero();
                            for iy in 0..h {
                                let grow = &gsrc[(iy * stride + ky) * ow..][..ow];
                                for ix in 0..w {
                                    acc = acc + grow[ix * stride + kx] * xsrc[iy * w + ix];
                                }
                            }
                            let slot = &mut dst[(i * kh + ky) * kw + kx];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        });

    let gb = (0..cout)
        .map(|o| {
            (0..n)
                .map(|bn| go[(bn * cout + o) * plane..][..plane].iter().copied().sum::<T>())
                .sum()
        })
        .collect();

    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![cout], gb)?,
    ))
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat index of the selected input element. Ties go to
/// the first element in scan order.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.dims4("maxpool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidShape {
            op: "maxpool2d",
            shape: input.shape().to_vec(),
            reason: "spatial extents must be even".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, idx))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&j, &v) in argmax.iter().zip(grad_out.data()) {
        gd[j] = gd[j] + v;
    }
    g
}

/// Affine map `input · weight + bias` for `input` N×F, `weight` F×G.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, f] = input.dims2("dense")?;
    let [wf, g] = weight.dims2("dense")?;
    if wf != f {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    check_bias("dense", bias, g)?;
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * g);
    for r in 0..n {
        for j in 0..g {
            let mut acc = b[j];
            for i in 0..f {
                acc = acc + x[r * f + i] * wt[i * g + j];
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![n, g], out)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, f] = input.dims2("dense")?;
    let [_, g] = weight.dims2("dense")?;
    let (x, wt, go) = (input.data(), weight.data(), grad_out.data());
    let gx = Tensor::from_fn(&[n, f], |p| {
        let (r, i) = (p / f, p % f);
        (0..g).map(|j| go[r * g + j] * wt[i * g + j]).sum()
    });
    let gw = Tensor::from_fn(&[f, g], |p| {
        let (i, j) = (p / g, p % g);
        (0..n).map(|r| x[r * f + i] * go[r * g + j]).sum()
    });
    let gb = Tensor::from_fn(&[g], |j| (0..n).map(|r| go[r * g + j]).sum());
    Ok((gx, gw, gb))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(s: T) -> T {
    if s >= T::zero() {
        T::one() / (T::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => relu(input),
        Activation::Sigmoid => sigmoid(input),
    }
}

/// Joins two N×C×H×W tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims4("concat_channels")?;
    let [nb, cb, hb, wb] = b.dims4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (pa + pb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * pa..][..pa]);
        out.extend_from_slice(&b.data()[i * pb..][..pb]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

/// Inverse of [`concat_channels`]: splits off the first `ca` channels.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = t.dims4("split_channels")?;
    if ca > c {
        return Err(TensorError::InvalidShape {
            op: "split_channels",
            shape: t.shape().to_vec(),
            reason: format!("cannot split {ca} channels"),
        });
    }
    let cb = c - ca;
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * pa);
    let mut b = Vec::with_capacity(n * pb);
    for i in 0..n {
        let row = &t.data()[i * (pa + pb)..][..pa + pb];
        a.extend_from_slice(&row[..pa]);
        b.extend_from_slice(&row[pa..]);
    }
    Ok((
        Tensor::new(vec![n, ca, h, w], a)?,
        Tensor::new(vec![n, cb, h, w], b)?,
    ))
}

/// Mean over each H×W plane: N×C×H×W → N×C.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("global_avg_pool")?;
    let plane = h * w;
    let denom = T::from_f64(plane as f64);
    let out = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let plane: usize = input_shape[2..].iter().product();
    let denom = T::from_f64(plane as f64);
    let go = grad_out.data();
    Tensor::from_fn(input_shape, |i| go[i / plane] / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 * 0.5 - 3.0);
        let k = t(&[1, 1, 1, 1], vec![1.0]);
        let b = t(&[1], vec![0.0]);
        assert_eq!(conv2d(&x, &k, &b, 1, Padding::Same).unwrap(), x);
    }

    #[test]
    fn constant_input_valid_conv() {
        let x = Tensor::full(&[1, 1, 5, 5], 2.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, &t(&[1], vec![0.0]), 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 18.0));
    }

    #[test]
    fn strided_valid_shape() {
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, &t(&[1], vec![0.0]), 2, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn same_padding_puts_extra_pixel_bottom_right() {
        // Even kernel: total pad 1 goes entirely to bottom/right.
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, &t(&[1], vec![0.0]), 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // top-left window covers 1,2,4,5
        assert_eq!(y.data()[0], 12.0);
        // bottom-right window covers only 9
        assert_eq!(y.data()[8], 9.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_rejects_kernel_larger_than_input() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), 1, Padding::Valid).is_err());
    }

    #[test]
    fn transposed_conv_spreads_blocks() {
        let x = Tensor::full(&[1, 1, 2, 2], 3.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = transposed_conv2d(&x, &k, &Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 3.0));

        // distinct inputs land in disjoint blocks
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = transposed_conv2d(&x, &k, &Tensor::zeros(&[1]), 2).unwrap();
        let expect = [
            1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn transposed_conv_zero_and_doubling() {
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let k = Tensor::from_fn(&[4, 3, 2, 2], |i| i as f64);
        let y = transposed_conv2d(&x, &k, &Tensor::zeros(&[4]), 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 16, 16]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let bad = Tensor::zeros(&[4, 2, 2, 2]);
        assert!(transposed_conv2d(&x, &bad, &Tensor::zeros(&[4]), 2).is_err());
    }

    #[test]
    fn maxpool_window_and_ties() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, idx) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);

        let c = Tensor::full(&[1, 1, 4, 4], 5.0);
        let (y, idx) = maxpool2d(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
        assert_eq!(idx, vec![0, 2, 8, 10]);

        let big = Tensor::<f64>::zeros(&[1, 1, 64, 64]);
        assert_eq!(maxpool2d(&big).unwrap().0.shape(), &[1, 1, 32, 32]);
        assert!(maxpool2d(&Tensor::<f64>::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn dense_examples() {
        let x = t(&[1, 2], vec![1.0, 2.0]);
        let w = t(&[2, 1], vec![1.0, 1.0]);
        assert_eq!(dense(&x, &w, &t(&[1], vec![0.5])).unwrap().data(), &[3.5]);

        let eye = Tensor::from_fn(&[2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[2])).unwrap().data(), x.data());

        let xs = t(&[3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let b = t(&[2], vec![0.25, -1.0]);
        let y = dense(&xs, &Tensor::zeros(&[2, 2]), &b).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, b.data());
        }
        assert!(dense(&xs, &Tensor::zeros(&[3, 2]), &b).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        let s = 1.7f64;
        assert!((sigmoid_scalar(-s) - (1.0 - sigmoid_scalar(s))).abs() < 1e-15);
        let r = relu(&t(&[2], vec![-3.2, 3.2]));
        assert_eq!(r.data(), &[0.0, 3.2]);
        let big = sigmoid(&t(&[2], vec![-800.0, 800.0]));
        assert!(big.all_finite());
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::from_fn(&[2, 8, 3, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 16, 3, 3], |i| -(i as f64));
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 24, 3, 3]);
        let (a2, b2) = split_channels(&c, 8).unwrap();
        assert_eq!((a2, b2), (a.clone(), b));

        let cc = concat_channels(&a, &a).unwrap();
        let (l, r) = split_channels(&cc, 8).unwrap();
        assert_eq!(l, r);
        assert!(concat_channels(&a, &Tensor::zeros(&[2, 1, 4, 3])).is_err());
    }

    #[test]
    fn gap_examples() {
        assert_eq!(
            global_avg_pool(&Tensor::full(&[1, 1, 3, 3], 7.0)).unwrap().data(),
            &[7.0]
        );
        let x = t(&[1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[3.0]);
        let z = global_avg_pool(&Tensor::<f64>::zeros(&[2, 3, 4, 4])).unwrap();
        assert_eq!(z.shape(), &[2, 3]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
