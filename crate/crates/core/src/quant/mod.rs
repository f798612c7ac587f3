//! Post-training compression: int8 and float16 weight storage, activation
//! calibration, and inference runtimes for each scheme.

pub mod int;
pub mod runtime;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use half::f16;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{self, CalibEntry, Container, Dtype, FormatError, TensorRecord, FORMAT_VERSION};
use crate::model::{ModelError, ModelWeights, UNetConfig};
use crate::tensor::Tensor;

pub use runtime::{quantized_forward, Runtime};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("full-integer quantization requires calibration data")]
    MissingCalibration,
    #[error("calibration table has no entry for activation {0}")]
    MissingActivation(String),
    #[error("unknown scheme {:?}; valid schemes: {}", .0, Scheme::NAMES.join(", "))]
    UnknownScheme(String),
    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
}

impl From<crate::tensor::TensorError> for QuantError {
    fn from(e: crate::tensor::TensorError) -> Self {
        QuantError::Model(e.into())
    }
}

/// Affine map `real = scale · (q − zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    /// Symmetric int8: `scale = max|x| / 127`, zero point 0.
    pub fn symmetric(max_abs: f64) -> Self {
        let scale = if max_abs > 0.0 { (max_abs / 127.0) as f32 } else { 1.0 };
        Self { scale, zero_point: 0 }
    }

    /// Affine int8 over `[min, max]` widened to include 0.
    pub fn affine(min: f64, max: f64) -> Self {
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        if hi - lo <= 0.0 {
            return Self {
                scale: 1.0,
                zero_point: 0,
            };
        }
        let scale = ((hi - lo) / 255.0) as f32;
        let zp = (-lo / scale as f64).round() as i64 - 128;
        Self {
            scale,
            zero_point: zp.clamp(-128, 127) as i32,
        }
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> i8 {
        let q = (x / self.scale as f64).round() + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f64 {
        self.scale as f64 * (q as i32 - self.zero_point) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Int8Symmetric,
    Int8Affine,
    Float16,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8 { data: Vec<i8>, params: QuantParams },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor<f32> {
        let data = match &self.payload {
            Payload::F32(v) => v.clone(),
            Payload::F16(v) => v.iter().map(|h| h.to_f32()).collect(),
            Payload::I8 { data, params } => data.iter().map(|&q| params.dequantize(q) as f32).collect(),
        };
        Tensor::new(self.shape.clone(), data).expect("payload length matches shape")
    }

    pub fn params(&self) -> Option<QuantParams> {
        match self.payload {
            Payload::I8 { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        match &self.payload {
            Payload::F32(v) => v.len() * 4,
            Payload::F16(v) => v.len() * 2,
            Payload::I8 { data, .. } => data.len(),
        }
    }
}

pub fn quantize_tensor(t: &Tensor<f32>, mode: QuantMode) -> QuantizedTensor {
    let d = t.data();
    let payload = match mode {
        QuantMode::Float16 => Payload::F16(d.iter().map(|&v| f16::from_f32(v)).collect()),
        QuantMode::Int8Symmetric => {
            let params = QuantParams::symmetric(d.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs())));
            Payload::I8 {
                data: d.iter().map(|&v| params.quantize(v as f64)).collect(),
                params,
            }
        }
        QuantMode::Int8Affine => {
            let (lo, hi) = d
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
            let params = if d.is_empty() {
                QuantParams::affine(0.0, 0.0)
            } else {
                QuantParams::affine(lo, hi)
            };
            Payload::I8 {
                data: d.iter().map(|&v| params.quantize(v as f64)).collect(),
                params,
            }
        }
    };
    QuantizedTensor {
        shape: t.shape().to_vec(),
        payload,
    }
}

/// Half the spacing of float16 values around `x`, the round-to-nearest
/// error bound for in-range values.
pub fn f16_half_ulp(x: f32) -> f64 {
    let h = f16::from_f32(x);
    let a = h.to_f64().abs();
    let next = f16::from_bits((f16::from_f64(a).to_bits()) + 1).to_f64();
    let prev = if a == 0.0 {
        a
    } else {
        f16::from_bits(f16::from_f64(a).to_bits() - 1).to_f64()
    };
    (next - a).max(a - prev) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Float32,
    DynamicRange,
    Float16,
    FullInt,
    FloatFallback,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Float32,
        Scheme::DynamicRange,
        Scheme::Float16,
        Scheme::FullInt,
        Scheme::FloatFallback,
    ];
    pub const NAMES: [&'static str; 5] = ["float32", "dynamic-range", "float16", "full-int", "float-fallback"];

    pub fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }

    /// Header scheme byte.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn needs_calibration(self) -> bool {
        matches!(self, Scheme::FullInt | Scheme::FloatFallback)
    }

    fn weight_mode(self) -> Option<QuantMode> {
        match self {
            Scheme::Float32 => None,
            Scheme::Float16 => Some(QuantMode::Float16),
            _ => Some(QuantMode::Int8Symmetric),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self, QuantError> {
        match s {
            "full-integer" => Ok(Scheme::FullInt),
            "dynamic" => Ok(Scheme::DynamicRange),
            _ => Self::NAMES
                .iter()
                .position(|&n| n == s)
                .map(|i| Self::ALL[i])
                .ok_or_else(|| QuantError::UnknownScheme(s.to_string())),
        }
    }
}

/// Observed `[min, max]` per named activation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTable {
    pub ranges: IndexMap<String, (f32, f32)>,
}

impl CalibrationTable {
    pub fn observe(&mut self, name: &str, values: &[f32]) {
        let (lo, hi) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        self.ranges
            .entry(name.to_string())
            .and_modify(|r| *r = (r.0.min(lo), r.1.max(hi)))
            .or_insert((lo, hi));
    }

    pub fn merge(&mut self, other: &CalibrationTable) {
        for (k, &(lo, hi)) in &other.ranges {
            self.ranges
                .entry(k.clone())
                .and_modify(|r| *r = (r.0.min(lo), r.1.max(hi)))
                .or_insert((lo, hi));
        }
    }

    pub fn get(&self, name: &str) -> Option<(f32, f32)> {
        self.ranges.get(name).copied()
    }

    pub fn params(&self, name: &str) -> Result<QuantParams, QuantError> {
        let (lo, hi) = self.get(name).ok_or_else(|| QuantError::MissingActivation(name.to_string()))?;
        Ok(QuantParams::affine(lo as f64, hi as f64))
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// Running per-activation extrema of the float model over all batches.
pub fn calibrate(weights: &ModelWeights, batches: &[Tensor<f32>]) -> Result<CalibrationTable, QuantError> {
    if batches.is_empty() {
        return Err(QuantError::MissingCalibration);
    }
    let mut table = CalibrationTable::default();
    for b in batches {
        table.merge(&runtime::observe(weights, b)?);
    }
    Ok(table)
}

pub struct QuantizedModel {
    pub scheme: Scheme,
    pub config: UNetConfig,
    pub tensors: IndexMap<String, QuantizedTensor>,
    pub calibration: CalibrationTable,
    runtime: OnceLock<Runtime>,
}

impl fmt::Debug for QuantizedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuantizedModel")
            .field("scheme", &self.scheme)
            .field("config", &self.config)
            .field("tensors", &self.tensors.len())
            .field("calibration", &self.calibration.len())
            .finish()
    }
}

impl Clone for QuantizedModel {
    fn clone(&self) -> Self {
        Self::new(self.scheme, self.config, self.tensors.clone(), self.calibration.clone())
    }
}

impl PartialEq for QuantizedModel {
    fn eq(&self, o: &Self) -> bool {
        self.scheme == o.scheme && self.config == o.config && self.tensors == o.tensors && self.calibration == o.calibration
    }
}

impl QuantizedModel {
    fn new(
        scheme: Scheme,
        config: UNetConfig,
        tensors: IndexMap<String, QuantizedTensor>,
        calibration: CalibrationTable,
    ) -> Self {
        Self {
            scheme,
            config,
            tensors,
            calibration,
            runtime: OnceLock::new(),
        }
    }

    /// Prepared execution state, built on first use.
    pub fn runtime(&self) -> Result<&Runtime, QuantError> {
        if let Some(r) = self.runtime.get() {
            return Ok(r);
        }
        let r = Runtime::prepare(self)?;
        Ok(self.runtime.get_or_init(|| r))
    }

    /// Float weights recovered from the stored payloads.
    pub fn dequantized(&self) -> IndexMap<String, Tensor<f32>> {
        self.tensors.iter().map(|(k, t)| (k.clone(), t.dequantize())).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let (dtype, quant, payload) = match &t.payload {
                    Payload::F32(v) => (Dtype::F32, None, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
                    Payload::F16(v) => (Dtype::F16, None, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
                    Payload::I8 { data, params } => (
                        Dtype::I8,
                        Some((params.scale, params.zero_point)),
                        data.iter().map(|&q| q as u8).collect(),
                    ),
                };
                TensorRecord {
                    name: name.clone(),
                    dtype,
                    shape: t.shape.clone(),
                    quant,
                    payload,
                }
            })
            .collect();
        let calibration = self
            .calibration
            .ranges
            .iter()
            .map(|(name, &(min, max))| CalibEntry {
                name: name.clone(),
                min,
                max,
            })
            .collect();
        Container {
            version: FORMAT_VERSION,
            scheme: self.scheme.tag(),
            config: self.config,
            tensors,
            calibration,
        }
        .encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, QuantError> {
        let c = Container::decode(bytes)?;
        let scheme = Scheme::from_tag(c.scheme)
            .ok_or_else(|| QuantError::UnknownScheme(format!("scheme byte {}", c.scheme)))?;
        let mut tensors = IndexMap::with_capacity(c.tensors.len());
        for rec in c.tensors {
            let payload = match rec.dtype {
                Dtype::F32 => Payload::F32(
                    rec.payload
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => Payload::F32(
                    rec.payload
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()) as f32)
                        .collect(),
                ),
                Dtype::F16 => Payload::F16(
                    rec.payload
                        .chunks_exact(2)
                        .map(|b| f16::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::I8 => {
                    let (scale, zero_point) = rec.quant.unwrap_or((1.0, 0));
                    Payload::I8 {
                        data: rec.payload.iter().map(|&b| b as i8).collect(),
                        params: QuantParams { scale, zero_point },
                    }
                }
            };
            tensors.insert(
                rec.name,
                QuantizedTensor {
                    shape: rec.shape,
                    payload,
                },
            );
        }
        let calibration = CalibrationTable {
            ranges: c.calibration.into_iter().map(|e| (e.name, (e.min, e.max))).collect(),
        };
        let m = Self::new(scheme, c.config, tensors, calibration);
        // reject files whose tensors do not fit the declared architecture
        let shapes = m.dequantized();
        ModelWeights::from_tensors(m.config, shapes)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), QuantError> {
        format::write_atomic(path, &self.to_bytes()).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, QuantError> {
        let bytes = std::fs::read(path).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }
}

/// Converts float weights to `scheme`. Weight kernels are compressed; biases
/// stay float32 except under float16, where every tensor is stored half.
pub fn apply_scheme(
    weights: &ModelWeights,
    scheme: Scheme,
    calib: Option<&CalibrationTable>,
) -> Result<QuantizedModel, QuantError> {
    let calibration = match (scheme.needs_calibration(), calib) {
        (true, None) => return Err(QuantError::MissingCalibration),
        (true, Some(c)) if c.is_empty() => return Err(QuantError::MissingCalibration),
        (true, Some(c)) => c.clone(),
        (false, _) => CalibrationTable::default(),
    };
    let mut tensors = IndexMap::with_capacity(weights.tensors().len());
    for (name, t) in weights.iter() {
        if !t.all_finite() {
            return Err(QuantError::NonFinite(name.to_string()));
        }
        let is_bias = name.ends_with(".bias");
        let q = match scheme.weight_mode() {
            None => QuantizedTensor {
                shape: t.shape().to_vec(),
                payload: Payload::F32(t.data().to_vec()),
            },
            Some(QuantMode::Float16) => quantize_tensor(t, QuantMode::Float16),
            Some(_) if is_bias => QuantizedTensor {
                shape: t.shape().to_vec(),
                payload: Payload::F32(t.data().to_vec()),
            },
            Some(mode) => quantize_tensor(t, mode),
        };
        tensors.insert(name.to_string(), q);
    }
    let m = QuantizedModel::new(scheme, weights.config, tensors, calibration);
    if scheme.needs_calibration() {
        m.runtime()?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, UNetConfig};

    fn tiny() -> UNetConfig {
        UNetConfig {
            input_size: 16,
            depth: 2,
            base_channels: 4,
            regression_hidden: 8,
            regression_dim: 3,
        }
    }

    #[test]
    fn hand_arithmetic_example() {
        let p = QuantParams {
            scale: 0.5,
            zero_point: 0,
        };
        assert_eq!(p.quantize(1.26), 3);
        assert_eq!(p.dequantize(3), 1.5);
        assert!((1.5f64 - 1.26).abs() <= 0.25);
    }

    #[test]
    fn symmetric_negation_and_zero_tensor() {
        let t = Tensor::new(vec![5], vec![0.3f32, -1.2, 0.7, 2.5, -0.01]).unwrap();
        let a = quantize_tensor(&t, QuantMode::Int8Symmetric);
        let b = quantize_tensor(&t.scale(-1.0), QuantMode::Int8Symmetric);
        let (Payload::I8 { data: da, params: pa }, Payload::I8 { data: db, params: pb }) = (&a.payload, &b.payload) else {
            panic!()
        };
        assert_eq!(pa, pb);
        assert!(da.iter().zip(db).all(|(x, y)| *x == -*y));
        let z = Tensor::<f32>::zeros(&[4]);
        for mode in [QuantMode::Int8Symmetric, QuantMode::Int8Affine, QuantMode::Float16] {
            let q = quantize_tensor(&z, mode);
            assert_eq!(q.dequantize(), z);
            if let Some(p) = q.params() {
                assert_eq!(p.scale, 1.0);
            }
        }
    }

    #[test]
    fn affine_formula() {
        let p = QuantParams::affine(-1.0, 3.0);
        assert!((p.scale as f64 - 4.0 / 255.0).abs() < 1e-7);
        assert_eq!(p.zero_point, (1.0 / p.scale as f64).round() as i32 - 128);
    }

    #[test]
    fn scheme_names_roundtrip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
            assert_eq!(Scheme::from_tag(s.tag()), Some(s));
        }
        let e = "int4".parse::<Scheme>().unwrap_err().to_string();
        assert!(e.contains("full-int") && e.contains("float16"), "{e}");
    }

    #[test]
    fn integer_schemes_need_calibration() {
        let w = model::build(&tiny(), 1).unwrap();
        for s in [Scheme::FullInt, Scheme::FloatFallback] {
            let e = apply_scheme(&w, s, None).unwrap_err();
            assert_eq!(e.to_string(), "full-integer quantization requires calibration data");
        }
        assert!(matches!(calibrate(&w, &[]), Err(QuantError::MissingCalibration)));
        assert!(apply_scheme(&w, Scheme::DynamicRange, None).is_ok());
    }

    #[test]
    fn calibration_is_monotone_and_order_free() {
        let w = model::build(&tiny(), 2).unwrap();
        let a = Tensor::from_fn(&[1, 1, 16, 16], |i| ((i * 7) % 13) as f32 / 13.0);
        let b = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i * 5) % 11) as f32 / 5.0);
        let ta = calibrate(&w, std::slice::from_ref(&a)).unwrap();
        let tab = calibrate(&w, &[a.clone(), b.clone()]).unwrap();
        let tba = calibrate(&w, &[b, a]).unwrap();
        assert_eq!(tab, tba);
        for (k, &(lo, hi)) in &ta.ranges {
            let (lo2, hi2) = tab.get(k).unwrap();
            assert!(lo2 <= lo && hi2 >= hi);
        }
        assert!(ta.get("input").is_some() && ta.get("fossa.fc2").is_some());
    }

    #[test]
    fn quantized_files_roundtrip_and_shrink() {
        let w = model::build(&tiny(), 3).unwrap();
        let x = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i * 37) % 101) as f32 / 101.0);
        let calib = calibrate(&w, std::slice::from_ref(&x)).unwrap();
        let f32_len = model::weights_to_bytes(&w).len();
        for s in Scheme::ALL {
            let q = apply_scheme(&w, s, Some(&calib)).unwrap();
            let bytes = q.to_bytes();
            assert_eq!(bytes[9], s.tag());
            let back = QuantizedModel::from_bytes(&bytes).unwrap();
            assert_eq!(back, q);
            if s != Scheme::Float32 {
                assert!(bytes.len() < f32_len, "{s}: {} vs {f32_len}", bytes.len());
            } else {
                assert_eq!(bytes, model::weights_to_bytes(&w));
            }
            let (logits, fossa) = quantized_forward(&q, &x).unwrap();
            assert_eq!(logits.shape(), &[2, 1, 16, 16]);
            assert_eq!(fossa.shape(), &[2, 3]);
        }
    }

    #[test]
    fn float_schemes_track_float_model() {
        let w = model::build(&tiny(), 4).unwrap();
        let x = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i * 13) % 29) as f32 / 29.0);
        let (l0, f0) = model::forward(&w, &x).unwrap();
        for (s, tol) in [(Scheme::DynamicRange, 0.1f32), (Scheme::Float16, 1e-2)] {
            let q = apply_scheme(&w, s, None).unwrap();
            let (l, f) = quantized_forward(&q, &x).unwrap();
            assert!(l.sub(&l0).unwrap().max_abs() <= tol, "{s} logits");
            assert!(f.sub(&f0).unwrap().max_abs() <= tol, "{s} fossa");
        }
    }
}
