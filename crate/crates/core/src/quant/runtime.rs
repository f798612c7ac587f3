//! Execution of quantized models and the calibration observer.

use std::collections::HashMap;

use indexmap::IndexMap;

use super::int::{self, IntLayer, QTensor};
use super::{CalibrationTable, Payload, QuantError, QuantParams, QuantizedModel, Scheme};
use crate::model::{self, lookup, Backend, DenseAct, FloatBackend, ModelError, ModelWeights, UNetConfig};
use crate::tensor::{self, Padding, Tensor};

pub const INPUT: &str = "input";

const SEG_HEAD: &str = "head.seg";

/// Float forward pass that records the range of every named activation.
/// For the sigmoid head the pre-activation is recorded.
struct Observer<'a> {
    params: &'a IndexMap<String, Tensor<f32>>,
    table: CalibrationTable,
}

impl Observer<'_> {
    fn wb(&self, layer: &str) -> Result<(&Tensor<f32>, &Tensor<f32>), ModelError> {
        Ok((
            lookup(self.params, &format!("{layer}.weight"))?,
            lookup(self.params, &format!("{layer}.bias"))?,
        ))
    }

    fn record(&mut self, layer: &str, t: Tensor<f32>) -> Tensor<f32> {
        self.table.observe(layer, t.data());
        t
    }
}

impl Backend for Observer<'_> {
    type Value = Tensor<f32>;

    fn conv(&mut self, layer: &str, x: &Tensor<f32>, relu: bool) -> Result<Tensor<f32>, ModelError> {
        let (w, b) = self.wb(layer)?;
        let y = tensor::conv2d(x, w, b, 1, Padding::Same)?;
        Ok(self.record(layer, if relu { tensor::relu(&y) } else { y }))
    }

    fn upconv(&mut self, layer: &str, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let (w, b) = self.wb(layer)?;
        let y = tensor::transposed_conv2d(x, w, b, 2)?;
        Ok(self.record(layer, y))
    }

    fn maxpool(&mut self, _layer: &str, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        Ok(tensor::maxpool2d(x)?.0)
    }

    fn concat(&mut self, layer: &str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let y = tensor::concat_channels(a, b)?;
        Ok(self.record(layer, y))
    }

    fn gap(&mut self, layer: &str, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let y = tensor::global_avg_pool(x)?;
        Ok(self.record(layer, y))
    }

    fn dense(&mut self, layer: &str, x: &Tensor<f32>, act: DenseAct) -> Result<Tensor<f32>, ModelError> {
        let (w, b) = self.wb(layer)?;
        let y = tensor::dense(x, w, b)?;
        Ok(match act {
            DenseAct::Relu => self.record(layer, tensor::relu(&y)),
            DenseAct::Sigmoid => tensor::sigmoid(&self.record(layer, y)),
        })
    }
}

pub(super) fn observe(weights: &ModelWeights, batch: &Tensor<f32>) -> Result<CalibrationTable, QuantError> {
    model::check_input(&weights.config, batch.shape())?;
    let mut obs = Observer {
        params: weights.tensors(),
        table: CalibrationTable::default(),
    };
    obs.table.observe(INPUT, batch.data());
    model::run(&mut obs, &weights.config, batch.clone())?;
    Ok(obs.table)
}

/// Prepared state of a quantized model.
#[derive(Debug)]
pub enum Runtime {
    /// Float compute over weights widened or dequantized once.
    Float(IndexMap<String, Tensor<f32>>),
    /// int8 execution; `float_head` holds the regression head weights when
    /// that head runs in float.
    Int {
        layers: HashMap<String, IntLayer>,
        acts: HashMap<String, QuantParams>,
        float_head: Option<IndexMap<String, Tensor<f32>>>,
    },
}

impl Runtime {
    pub(super) fn prepare(m: &QuantizedModel) -> Result<Self, QuantError> {
        match m.scheme {
            Scheme::Float32 | Scheme::DynamicRange | Scheme::Float16 => Ok(Runtime::Float(m.dequantized())),
            Scheme::FullInt | Scheme::FloatFallback => {
                let mut layers = HashMap::new();
                for (name, t) in &m.tensors {
                    let Some(layer) = name.strip_suffix(".weight") else { continue };
                    let Payload::I8 { data, params } = &t.payload else {
                        return Err(ModelError::Other(format!("{name} is not stored as int8")).into());
                    };
                    let bias = m
                        .tensors
                        .get(&format!("{layer}.bias"))
                        .ok_or_else(|| ModelError::MissingWeight(format!("{layer}.bias")))?
                        .dequantize();
                    layers.insert(
                        layer.to_string(),
                        IntLayer {
                            shape: t.shape.clone(),
                            weights: data.clone(),
                            w_scale: params.scale,
                            bias: bias.into_data(),
                        },
                    );
                }
                let mut acts = HashMap::new();
                for name in activation_names(&m.config) {
                    let p = m.calibration.params(&name)?;
                    acts.insert(name, p);
                }
                let float_head = (m.scheme == Scheme::FloatFallback).then(|| {
                    m.tensors
                        .iter()
                        .filter(|(k, _)| k.starts_with("fossa."))
                        .map(|(k, t)| (k.clone(), t.dequantize()))
                        .collect()
                });
                Ok(Runtime::Int {
                    layers,
                    acts,
                    float_head,
                })
            }
        }
    }
}

/// Activations whose quantization parameters the integer path needs.
pub fn activation_names(cfg: &UNetConfig) -> Vec<String> {
    let mut v = vec![INPUT.to_string()];
    for d in 0..cfg.depth {
        v.push(format!("enc{d}.conv1"));
        v.push(format!("enc{d}.conv2"));
    }
    v.push("bottleneck.conv1".into());
    v.push("bottleneck.conv2".into());
    v.push("fossa.gap".into());
    v.push("fossa.fc1".into());
    v.push("fossa.fc2".into());
    for d in (0..cfg.depth).rev() {
        for l in ["up", "cat", "conv1", "conv2"] {
            v.push(format!("dec{d}.{l}"));
        }
    }
    v.push(SEG_HEAD.into());
    v
}

/// int8 values, or float once the graph has left the integer domain.
#[derive(Debug, Clone)]
pub enum Mixed {
    Int(QTensor),
    Float(Tensor<f32>),
}

impl Mixed {
    fn into_float(self) -> Tensor<f32> {
        match self {
            Mixed::Float(t) => t,
            Mixed::Int(q) => Tensor::new(q.shape.clone(), q.dequantize()).expect("consistent shape"),
        }
    }

    fn int(&self) -> Result<&QTensor, ModelError> {
        match self {
            Mixed::Int(q) => Ok(q),
            Mixed::Float(_) => Err(ModelError::Other("integer op received a float activation".into())),
        }
    }
}

struct IntBackend<'a> {
    layers: &'a HashMap<String, IntLayer>,
    acts: &'a HashMap<String, QuantParams>,
    float_head: Option<FloatBackend<'a, f32>>,
}

impl IntBackend<'_> {
    fn layer(&self, name: &str) -> Result<&IntLayer, ModelError> {
        self.layers
            .get(name)
            .ok_or_else(|| ModelError::MissingWeight(format!("{name}.weight")))
    }

    fn act(&self, name: &str) -> Result<QuantParams, ModelError> {
        self.acts
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Other(format!("no calibration for activation {name}")))
    }
}

impl Backend for IntBackend<'_> {
    type Value = Mixed;

    fn conv(&mut self, layer: &str, x: &Mixed, relu: bool) -> Result<Mixed, ModelError> {
        Ok(Mixed::Int(int::conv2d(x.int()?, self.layer(layer)?, self.act(layer)?, relu)?))
    }

    fn upconv(&mut self, layer: &str, x: &Mixed) -> Result<Mixed, ModelError> {
        Ok(Mixed::Int(int::transposed_conv2d(x.int()?, self.layer(layer)?, self.act(layer)?, 2)?))
    }

    fn maxpool(&mut self, _layer: &str, x: &Mixed) -> Result<Mixed, ModelError> {
        Ok(Mixed::Int(int::maxpool2d(x.int()?)?))
    }

    fn concat(&mut self, layer: &str, a: &Mixed, b: &Mixed) -> Result<Mixed, ModelError> {
        Ok(Mixed::Int(int::concat_channels(a.int()?, b.int()?, self.act(layer)?)?))
    }

    fn gap(&mut self, layer: &str, x: &Mixed) -> Result<Mixed, ModelError> {
        if let Some(fb) = self.float_head.as_mut() {
            let xf = x.clone().into_float();
            return Ok(Mixed::Float(fb.gap(layer, &xf)?));
        }
        Ok(Mixed::Int(int::global_avg_pool(x.int()?, self.act(layer)?)?))
    }

    fn dense(&mut self, layer: &str, x: &Mixed, act: DenseAct) -> Result<Mixed, ModelError> {
        if let Some(fb) = self.float_head.as_mut() {
            let xf = x.clone().into_float();
            return Ok(Mixed::Float(fb.dense(layer, &xf, act)?));
        }
        let l = self.layer(layer)?;
        let p = self.act(layer)?;
        Ok(Mixed::Int(match act {
            DenseAct::Relu => int::dense(x.int()?, l, p, true)?,
            DenseAct::Sigmoid => int::sigmoid(&int::dense(x.int()?, l, p, false)?),
        }))
    }
}

/// int8 forward pass with int8 input and outputs. Only valid for the
/// full-integer scheme.
pub fn forward_int8(m: &QuantizedModel, input: &QTensor) -> Result<(QTensor, QTensor), QuantError> {
    let Runtime::Int {
        layers,
        acts,
        float_head: None,
    } = m.runtime()?
    else {
        return Err(ModelError::Other(format!("{} model has no integer interface", m.scheme)).into());
    };
    model::check_input(&m.config, &input.shape)?;
    let mut b = IntBackend {
        layers,
        acts,
        float_head: None,
    };
    let (l, f) = model::run(&mut b, &m.config, Mixed::Int(input.clone()))?;
    Ok((l.int()?.clone(), f.int()?.clone()))
}

/// Same contract as [`model::forward`] for every scheme. Integer schemes
/// quantize the input and dequantize the outputs at the boundary.
pub fn quantized_forward(m: &QuantizedModel, batch: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>), QuantError> {
    model::check_input(&m.config, batch.shape())?;
    match m.runtime()? {
        Runtime::Float(params) => Ok(model::forward_with(&m.config, params, batch)?),
        Runtime::Int {
            layers,
            acts,
            float_head,
        } => {
            let p_in = acts[INPUT];
            let x = QTensor::quantize(batch.shape(), batch.data(), p_in);
            let mut b = IntBackend {
                layers,
                acts,
                float_head: float_head.as_ref().map(FloatBackend::new),
            };
            let (l, f) = model::run(&mut b, &m.config, Mixed::Int(x))?;
            Ok((l.into_float(), f.into_float()))
        }
    }
}
