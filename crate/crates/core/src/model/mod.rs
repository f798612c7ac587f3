//! Multi-task U-Net: a segmentation encoder/decoder plus a fossa regression
//! head tapped from the bottleneck.
//!
//! The architecture is written once against [`Backend`], which is
//! implemented for plain float evaluation, for the gradient tape, and by
//! the quantized runtimes.

mod backend;
mod io;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::FormatError;
use crate::tensor::{Scalar, Tensor, TensorError};

pub use backend::{lookup, Backend, DenseAct, FloatBackend, TapeBackend};
pub use io::{load_weights, save_weights, weights_from_bytes, weights_to_bytes};

/// Number of regression outputs: normalized cx, cy and angle.
pub const REGRESSION_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input batch has shape {got:?}, expected N×1×{size}×{size}")]
    WrongInput { got: Vec<usize>, size: usize },
    #[error("missing weight tensor {0}")]
    MissingWeight(String),
    #[error("weight {name} has shape {got:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub input_size: usize,
    /// Number of pooling steps between the input and the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    pub regression_hidden: usize,
    pub regression_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UNetConfig {
    /// 64×64 input, three levels, eight base channels.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            depth: 3,
            base_channels: 8,
            regression_hidden: 32,
            regression_dim: REGRESSION_DIM,
        }
    }

    /// 512×512 input, four levels, eight base channels.
    pub fn paper_scale() -> Self {
        Self {
            input_size: 512,
            depth: 4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.depth < 2 {
            return bad(format!("depth must be >= 2, got {}", self.depth));
        }
        if self.depth > 12 {
            return bad(format!("depth {} is unreasonably large", self.depth));
        }
        if self.input_size == 0 || self.input_size % 2 != 0 {
            return bad(format!("input_size must be a positive even integer, got {}", self.input_size));
        }
        if self.input_size % (1 << self.depth) != 0 {
            return bad(format!(
                "input_size {} must be divisible by 2^depth = {}",
                self.input_size,
                1usize << self.depth
            ));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1".into());
        }
        if self.regression_hidden == 0 {
            return bad("regression_hidden must be >= 1".into());
        }
        if self.regression_dim != REGRESSION_DIM {
            return bad(format!("regression_dim must be {REGRESSION_DIM}, got {}", self.regression_dim));
        }
        Ok(())
    }

    /// Channel count at encoder level `level` (the bottleneck is level `depth`).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every weight tensor the configuration implies, in canonical order.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = 1;
        for d in 0..self.depth {
            let c = self.channels(d);
            conv(&mut out, format!("enc{d}.conv1"), cin, c, 3);
            conv(&mut out, format!("enc{d}.conv2"), c, c, 3);
            cin = c;
        }
        let cb = self.channels(self.depth);
        conv(&mut out, "bottleneck.conv1".into(), cin, cb, 3);
        conv(&mut out, "bottleneck.conv2".into(), cb, cb, 3);
        for d in (0..self.depth).rev() {
            let c = self.channels(d);
            conv(&mut out, format!("dec{d}.up"), self.channels(d + 1), c, 2);
            conv(&mut out, format!("dec{d}.conv1"), 2 * c, c, 3);
            conv(&mut out, format!("dec{d}.conv2"), c, c, 3);
        }
        conv(&mut out, "head.seg".into(), self.channels(0), 1, 1);
        out.push(("fossa.fc1.weight".into(), vec![cb, self.regression_hidden]));
        out.push(("fossa.fc1.bias".into(), vec![self.regression_hidden]));
        out.push(("fossa.fc2.weight".into(), vec![self.regression_hidden, self.regression_dim]));
        out.push(("fossa.fc2.bias".into(), vec![self.regression_dim]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Whether a weight name belongs to the segmentation decoder path.
    pub fn is_decoder_weight(name: &str) -> bool {
        name.starts_with("dec") || name.starts_with("head.")
    }
}

/// Named weight collection for one configuration, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: UNetConfig,
    pub format_version: u32,
    tensors: IndexMap<String, Tensor<f32>>,
}

impl ModelWeights {
    /// Wraps an existing tensor map after checking it against the config.
    pub fn from_tensors(config: UNetConfig, tensors: IndexMap<String, Tensor<f32>>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = config.layer_shapes();
        let mut ordered = IndexMap::with_capacity(expected.len());
        let mut tensors = tensors;
        for (name, shape) in expected {
            let t = tensors
                .swap_remove(&name)
                .ok_or_else(|| ModelError::MissingWeight(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::WeightShape {
                    name,
                    got: t.shape().to_vec(),
                    expected: shape,
                });
            }
            ordered.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::Other(format!("unexpected weight tensor {extra}")));
        }
        Ok(Self {
            config,
            format_version: crate::format::FORMAT_VERSION,
            tensors: ordered,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every tensor into another precision.
    pub fn cast<T: Scalar>(&self) -> IndexMap<String, Tensor<T>> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect()
    }
}

/// He-normal kernels and zero biases, deterministic in `seed`.
pub fn build(config: &UNetConfig, seed: u64) -> Result<ModelWeights, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = IndexMap::new();
    for (name, shape) in config.layer_shapes() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = if shape.len() == 4 {
                shape[1..].iter().product()
            } else {
                shape[0]
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| ModelError::Other(e.to_string()))?;
            Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
        };
        tensors.insert(name, t);
    }
    ModelWeights::from_tensors(*config, tensors)
}

/// Runs the architecture on any backend. Returns (segmentation logits,
/// sigmoid-bounded fossa regression).
pub fn run<B: Backend>(b: &mut B, cfg: &UNetConfig, input: B::Value) -> Result<(B::Value, B::Value), ModelError> {
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = input;
    for d in 0..cfg.depth {
        let h = b.conv(&format!("enc{d}.conv1"), &x, true)?;
        let h = b.conv(&format!("enc{d}.conv2"), &h, true)?;
        x = b.maxpool(&format!("enc{d}.pool"), &h)?;
        skips.push(h);
    }
    let h = b.conv("bottleneck.conv1", &x, true)?;
    let bottleneck = b.conv("bottleneck.conv2", &h, true)?;

    let pooled = b.gap("fossa.gap", &bottleneck)?;
    let hidden = b.dense("fossa.fc1", &pooled, DenseAct::Relu)?;
    let fossa = b.dense("fossa.fc2", &hidden, DenseAct::Sigmoid)?;

    let mut x = bottleneck;
    for d in (0..cfg.depth).rev() {
        let up = b.upconv(&format!("dec{d}.up"), &x)?;
        let skip = skips.pop().expect("one skip per level");
        let cat = b.concat(&format!("dec{d}.cat"), &skip, &up)?;
        let h = b.conv(&format!("dec{d}.conv1"), &cat, true)?;
        x = b.conv(&format!("dec{d}.conv2"), &h, true)?;
    }
    let logits = b.conv("head.seg", &x, false)?;
    Ok((logits, fossa))
}

pub(crate) fn check_input(cfg: &UNetConfig, shape: &[usize]) -> Result<(), ModelError> {
    match shape {
        [_, 1, h, w] if *h == cfg.input_size && *w == cfg.input_size => Ok(()),
        _ => Err(ModelError::WrongInput {
            got: shape.to_vec(),
            size: cfg.input_size,
        }),
    }
}

/// Float forward pass in any precision over an explicit parameter map.
pub fn forward_with<T: Scalar>(
    cfg: &UNetConfig,
    params: &IndexMap<String, Tensor<T>>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
    check_input(cfg, batch.shape())?;
    let mut b = FloatBackend::new(params);
    run(&mut b, cfg, batch.clone())
}

/// Single-precision inference: logits N×1×S×S and fossa N×3 in (0,1).
pub fn forward(weights: &ModelWeights, batch: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>), ModelError> {
    forward_with(&weights.config, weights.tensors(), batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form parameter count for a depth-2 U-Net with base channels c,
    /// one input channel and hidden width h.
    fn closed_form(c: usize, h: usize) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let enc = conv(1, c, 3) + conv(c, c, 3) + conv(c, 2 * c, 3) + conv(2 * c, 2 * c, 3);
        let bott = conv(2 * c, 4 * c, 3) + conv(4 * c, 4 * c, 3);
        let dec1 = conv(4 * c, 2 * c, 2) + conv(4 * c, 2 * c, 3) + conv(2 * c, 2 * c, 3);
        let dec0 = conv(2 * c, c, 2) + conv(2 * c, c, 3) + conv(c, c, 3);
        let seg = conv(c, 1, 1);
        let head = 4 * c * h + h + h * 3 + 3;
        enc + bott + dec1 + dec0 + seg + head
    }

    #[test]
    fn depth2_base1_param_count_matches_closed_form() {
        let cfg = UNetConfig {
            input_size: 16,
            depth: 2,
            base_channels: 1,
            regression_hidden: 4,
            regression_dim: 3,
        };
        // Hand expansion for c=1, h=4:
        // enc 10+10+20+38 = 78; bott 76+148 = 224; dec1 34+74+38 = 146;
        // dec0 9+19+10 = 38; seg 2; head 16+4+12+3 = 35 => 523
        assert_eq!(closed_form(1, 4), 523);
        let w = build(&cfg, 0).unwrap();
        assert_eq!(w.parameter_count(), 523);
        assert_eq!(cfg.parameter_count(), 523);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = UNetConfig::desk();
        assert_eq!(build(&cfg, 42).unwrap(), build(&cfg, 42).unwrap());
        assert_ne!(build(&cfg, 42).unwrap(), build(&cfg, 43).unwrap());
    }

    #[test]
    fn invalid_configs_name_the_constraint() {
        let mut cfg = UNetConfig::desk();
        cfg.input_size = 60;
        let msg = build(&cfg, 0).unwrap_err().to_string();
        assert!(msg.contains("divisible by 2^depth"), "{msg}");
        cfg = UNetConfig::desk();
        cfg.depth = 1;
        assert!(build(&cfg, 0).unwrap_err().to_string().contains("depth"));
        cfg = UNetConfig::desk();
        cfg.regression_dim = 4;
        assert!(build(&cfg, 0).unwrap_err().to_string().contains("regression_dim"));
    }

    #[test]
    fn biases_start_at_zero() {
        let w = build(&UNetConfig::desk(), 1).unwrap();
        for (name, t) in w.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    fn small() -> UNetConfig {
        UNetConfig {
            input_size: 16,
            depth: 2,
            base_channels: 2,
            regression_hidden: 4,
            regression_dim: 3,
        }
    }

    #[test]
    fn forward_shapes_and_bounds() {
        let cfg = small();
        let w = build(&cfg, 3).unwrap();
        let x = Tensor::from_fn(&[3, 1, 16, 16], |i| ((i * 7919) % 255) as f32 / 255.0);
        let (logits, fossa) = forward(&w, &x).unwrap();
        assert_eq!(logits.shape(), &[3, 1, 16, 16]);
        assert_eq!(fossa.shape(), &[3, 3]);
        assert!(fossa.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let wrong = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(matches!(forward(&w, &wrong), Err(ModelError::WrongInput { .. })));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = small();
        let w = build(&cfg, 5).unwrap();
        let a = Tensor::from_fn(&[1, 1, 16, 16], |i| (i as f32 * 0.13).sin());
        let b = Tensor::from_fn(&[1, 1, 16, 16], |i| (i as f32 * 0.07).cos());
        let ab = Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap();
        let ba = Tensor::stack_batch(&[b, a]).unwrap();
        let (l1, f1) = forward(&w, &ab).unwrap();
        let (l2, f2) = forward(&w, &ba).unwrap();
        assert_eq!(l1.slice_batch(0, 1), l2.slice_batch(1, 2));
        assert_eq!(l1.slice_batch(1, 2), l2.slice_batch(0, 1));
        assert_eq!(f1.slice_batch(0, 1), f2.slice_batch(1, 2));
    }

    #[test]
    fn zeroing_decoder_leaves_fossa_unchanged() {
        let cfg = small();
        let w = build(&cfg, 9).unwrap();
        let mut z = w.clone();
        let names: Vec<String> = z
            .iter()
            .filter(|(n, _)| UNetConfig::is_decoder_weight(n))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            let t = z.get_mut(&n).unwrap();
            t.data_mut().fill(0.0);
        }
        let x = Tensor::from_fn(&[2, 1, 16, 16], |i| (i as f32 * 0.31).sin());
        let (_, f1) = forward(&w, &x).unwrap();
        let (l2, f2) = forward(&z, &x).unwrap();
        assert_eq!(f1, f2);
        assert!(l2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segmentation_probabilities_in_unit_interval() {
        let cfg = small();
        let w = build(&cfg, 11).unwrap();
        let x = Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 5) as f32);
        let (logits, _) = forward(&w, &x).unwrap();
        let p = crate::tensor::sigmoid(&logits.cast::<f64>());
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
