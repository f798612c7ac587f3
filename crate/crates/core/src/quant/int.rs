//! Integer kernels: int8 activations and weights, int32 accumulation,
//! fixed-point requantization.

use rayon::prelude::*;

use super::QuantParams;
use crate::tensor::ops::ConvGeom;
use crate::tensor::{Padding, TensorError};

/// Real multiplier `m` as `m0 · 2^(exponent − 31)` with `m0` in
/// `[2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedMultiplier {
    pub m0: i32,
    pub exponent: i32,
}

impl FixedMultiplier {
    pub fn from_real(m: f64) -> Self {
        assert!(m.is_finite() && m >= 0.0, "multiplier must be finite and non-negative");
        if m == 0.0 {
            return Self { m0: 0, exponent: 0 };
        }
        let mut exponent = m.log2().floor() as i32 + 1;
        let mut frac = m / 2f64.powi(exponent);
        // guard against log2 rounding at exact powers of two
        if frac >= 1.0 {
            frac /= 2.0;
            exponent += 1;
        } else if frac < 0.5 {
            frac *= 2.0;
            exponent -= 1;
        }
        let mut m0 = (frac * (1u64 << 31) as f64).round() as i64;
        if m0 == 1 << 31 {
            m0 /= 2;
            exponent += 1;
        }
        Self { m0: m0 as i32, exponent }
    }

    /// `round_half_away(v · m)`, computed exactly in integer arithmetic.
    pub fn apply(&self, v: i64) -> i64 {
        let prod = v as i128 * self.m0 as i128;
        let shift = 31 - self.exponent;
        if shift <= 0 {
            return (prod << (-shift)) as i64;
        }
        let half = 1i128 << (shift - 1);
        let mag = (prod.abs() + half) >> shift;
        (if prod < 0 { -mag } else { mag }) as i64
    }
}

#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

#[inline]
pub fn saturate(v: i64) -> i8 {
    v.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

/// int8 tensor with its affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub params: QuantParams,
}

impl QTensor {
    pub fn quantize(shape: &[usize], values: &[f32], params: QuantParams) -> Self {
        Self {
            shape: shape.to_vec(),
            data: values.iter().map(|&v| params.quantize(v as f64)).collect(),
            params,
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.data.iter().map(|&q| self.params.dequantize(q) as f32).collect()
    }
}

/// int8 weights of one layer with per-tensor symmetric scale and float
/// biases; biases are folded into int32 once the input scale is known.
#[derive(Debug, Clone, PartialEq)]
pub struct IntLayer {
    pub shape: Vec<usize>,
    pub weights: Vec<i8>,
    pub w_scale: f32,
    pub bias: Vec<f32>,
}

impl IntLayer {
    /// Bias in accumulator units `s_in · s_w`.
    pub fn bias_i32(&self, in_scale: f32) -> Vec<i32> {
        let s = in_scale as f64 * self.w_scale as f64;
        self.bias
            .iter()
            .map(|&b| round_half_away(b as f64 / s).clamp(i32::MIN as f64, i32::MAX as f64) as i32)
            .collect()
    }

    fn multiplier(&self, in_scale: f32, out: &QuantParams) -> FixedMultiplier {
        FixedMultiplier::from_real(in_scale as f64 * self.w_scale as f64 / out.scale as f64)
    }
}

#[inline]
fn finish(acc: i32, m: &FixedMultiplier, out: &QuantParams, relu: bool) -> i8 {
    let v = m.apply(acc as i64) + out.zero_point as i64;
    let lo = if relu { out.zero_point as i64 } else { i8::MIN as i64 };
    v.clamp(lo, i8::MAX as i64) as i8
}

fn centred(x: &QTensor) -> Vec<i32> {
    let zp = x.params.zero_point;
    x.data.iter().map(|&q| q as i32 - zp).collect()
}

/// Stride-1 "same" convolution on int8 data. Padded positions contribute
/// the real value 0.
pub fn conv2d(x: &QTensor, layer: &IntLayer, out: QuantParams, relu: bool) -> Result<QTensor, TensorError> {
    let g = ConvGeom::new(&x.shape, &layer.shape, 1, Padding::Same)?;
    let xc = centred(x);
    let bias = layer.bias_i32(x.params.scale);
    let m = layer.multiplier(x.params.scale, &out);
    let w = &layer.weights;
    let plane = g.oh * g.ow;
    let mut data = vec![0i8; g.n * g.cout * plane];
    data.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, o) = (idx / g.cout, idx % g.cout);
        let mut acc = vec![bias[o]; plane];
        for i in 0..g.cin {
            let src = &xc[(n * g.cin + i) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((o * g.cin + i) * g.kh + ky) * g.kw + kx] as i32;
                    let cols = g.valid_cols(kx);
                    for oy in g.valid_rows(ky) {
                        let iy = oy + ky - g.pad_top;
                        let srow = &src[iy * g.w..][..g.w];
                        let arow = &mut acc[oy * g.ow..][..g.ow];
                        for ox in cols.clone() {
                            arow[ox] += wv * srow[ox + kx - g.pad_left];
                        }
                    }
                }
            }
        }
        for (d, &a) in dst.iter_mut().zip(&acc) {
            *d = finish(a, &m, &out, relu);
        }
    });
    Ok(QTensor {
        shape: vec![g.n, g.cout, g.oh, g.ow],
        data,
        params: out,
    })
}

/// 2×2-style transposed convolution with the given stride.
pub fn transposed_conv2d(x: &QTensor, layer: &IntLayer, out: QuantParams, stride: usize) -> Result<QTensor, TensorError> {
    let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (x.shape.as_slice(), layer.shape.as_slice()) else {
        return Err(TensorError::ShapeMismatch {
            op: "transposed_conv2d",
            left: x.shape.clone(),
            right: layer.shape.clone(),
        });
    };
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "transposed_conv2d",
            left: x.shape.clone(),
            right: layer.shape.clone(),
        });
    }
    let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    let xc = centred(x);
    let bias = layer.bias_i32(x.params.scale);
    let m = layer.multiplier(x.params.scale, &out);
    let wt = &layer.weights;
    let plane = oh * ow;
    let mut data = vec![0i8; n * cout * plane];
    data.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (bn, o) = (idx / cout, idx % cout);
        let mut acc = vec![bias[o]; plane];
        for i in 0..cin {
            let src = &xc[(bn * cin + i) * h * w..][..h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((o * cin + i) * kh + ky) * kw + kx] as i32;
                    for iy in 0..h {
                        for ix in 0..w {
                            acc[(iy * stride + ky) * ow + ix * stride + kx] += wv * src[iy * w + ix];
                        }
                    }
                }
            }
        }
        for (d, &a) in dst.iter_mut().zip(&acc) {
            *d = finish(a, &m, &out, false);
        }
    });
    Ok(QTensor {
        shape: vec![n, cout, oh, ow],
        data,
        params: out,
    })
}

/// 2×2 stride-2 max pooling; the affine map is monotone so parameters pass
/// through unchanged.
pub fn maxpool2d(x: &QTensor) -> Result<QTensor, TensorError> {
    let &[n, c, h, w] = x.shape.as_slice() else {
        return Err(TensorError::InvalidShape {
            op: "maxpool2d",
            shape: x.shape.clone(),
            reason: "expected rank 4".into(),
        });
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidShape {
            op: "maxpool2d",
            shape: x.shape.clone(),
            reason: "spatial extents must be even".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for p in x.data.chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, xx) = (2 * oy, 2 * ox);
                let m = p[y * w + xx].max(p[y * w + xx + 1]).max(p[(y + 1) * w + xx]).max(p[(y + 1) * w + xx + 1]);
                data.push(m);
            }
        }
    }
    Ok(QTensor {
        shape: vec![n, c, oh, ow],
        data,
        params: x.params,
    })
}

fn requant_into(x: &QTensor, out: &QuantParams) -> Vec<i8> {
    let m = FixedMultiplier::from_real(x.params.scale as f64 / out.scale as f64);
    let zp = x.params.zero_point as i64;
    x.data
        .iter()
        .map(|&q| saturate(m.apply(q as i64 - zp) + out.zero_point as i64))
        .collect()
}

/// Channel concatenation with both inputs rescaled to `out`.
pub fn concat_channels(a: &QTensor, b: &QTensor, out: QuantParams) -> Result<QTensor, TensorError> {
    let (&[n, ca, h, w], &[nb, cb, hb, wb]) = (a.shape.as_slice(), b.shape.as_slice()) else {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    };
    if (n, h, w) != (nb, hb, wb) {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (ra, rb) = (requant_into(a, &out), requant_into(b, &out));
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(n * (pa + pb));
    for i in 0..n {
        data.extend_from_slice(&ra[i * pa..][..pa]);
        data.extend_from_slice(&rb[i * pb..][..pb]);
    }
    Ok(QTensor {
        shape: vec![n, ca + cb, h, w],
        data,
        params: out,
    })
}

/// Plane means: N×C×H×W → N×C via an integer sum and one rescale.
pub fn global_avg_pool(x: &QTensor, out: QuantParams) -> Result<QTensor, TensorError> {
    let &[n, c, h, w] = x.shape.as_slice() else {
        return Err(TensorError::InvalidShape {
            op: "global_avg_pool",
            shape: x.shape.clone(),
            reason: "expected rank 4".into(),
        });
    };
    let plane = h * w;
    let m = FixedMultiplier::from_real(x.params.scale as f64 / (plane as f64 * out.scale as f64));
    let zp = x.params.zero_point as i64;
    let data = x
        .data
        .chunks(plane)
        .map(|p| {
            let s: i64 = p.iter().map(|&q| q as i64 - zp).sum();
            saturate(m.apply(s) + out.zero_point as i64)
        })
        .collect();
    Ok(QTensor {
        shape: vec![n, c],
        data,
        params: out,
    })
}

/// `x · W + b` for `x` N×F and weights F×G.
pub fn dense(x: &QTensor, layer: &IntLayer, out: QuantParams, relu: bool) -> Result<QTensor, TensorError> {
    let (&[n, f], &[wf, g]) = (x.shape.as_slice(), layer.shape.as_slice()) else {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            left: x.shape.clone(),
            right: layer.shape.clone(),
        });
    };
    if wf != f {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            left: x.shape.clone(),
            right: layer.shape.clone(),
        });
    }
    let xc = centred(x);
    let bias = layer.bias_i32(x.params.scale);
    let m = layer.multiplier(x.params.scale, &out);
    let mut data = Vec::with_capacity(n * g);
    for r in 0..n {
        for j in 0..g {
            let mut acc = bias[j];
            for i in 0..f {
                acc += xc[r * f + i] * layer.weights[i * g + j] as i32;
            }
            data.push(finish(acc, &m, &out, relu));
        }
    }
    Ok(QTensor {
        shape: vec![n, g],
        data,
        params: out,
    })
}

/// Output parameters of the int8 sigmoid: `[0, 255/256]` on 256 levels.
pub const SIGMOID_OUT: QuantParams = QuantParams {
    scale: 1.0 / 256.0,
    zero_point: -128,
};

/// 256-entry lookup table indexed by `q + 128`.
pub fn sigmoid_lut(input: &QuantParams) -> [i8; 256] {
    let mut lut = [0i8; 256];
    for (i, e) in lut.iter_mut().enumerate() {
        let q = i as i32 - 128;
        let real = input.dequantize(q as i8);
        let s = crate::tensor::ops::sigmoid_scalar(real);
        *e = SIGMOID_OUT.quantize(s);
    }
    lut
}

pub fn sigmoid(x: &QTensor) -> QTensor {
    let lut = sigmoid_lut(&x.params);
    QTensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&q| lut[(q as i32 + 128) as usize]).collect(),
        params: SIGMOID_OUT,
    }
}
