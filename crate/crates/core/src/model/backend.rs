use std::collections::HashMap;

use indexmap::IndexMap;

use super::ModelError;
use crate::tensor::{self, Padding, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseAct {
    Relu,
    Sigmoid,
}

/// Execution target for [`super::run`]. Each call names its layer; weights
/// are looked up as `{layer}.weight` / `{layer}.bias`, and quantized
/// runtimes key activation ranges by the same name.
pub trait Backend {
    type Value;

    /// Stride-1 "same" convolution, optionally followed by relu.
    fn conv(&mut self, layer: &str, x: &Self::Value, relu: bool) -> Result<Self::Value, ModelError>;
    /// 2×2 stride-2 transposed convolution.
    fn upconv(&mut self, layer: &str, x: &Self::Value) -> Result<Self::Value, ModelError>;
    fn maxpool(&mut self, layer: &str, x: &Self::Value) -> Result<Self::Value, ModelError>;
    fn concat(&mut self, layer: &str, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, ModelError>;
    fn gap(&mut self, layer: &str, x: &Self::Value) -> Result<Self::Value, ModelError>;
    fn dense(&mut self, layer: &str, x: &Self::Value, act: DenseAct) -> Result<Self::Value, ModelError>;
}

pub fn lookup<'a, V>(map: &'a IndexMap<String, V>, name: &str) -> Result<&'a V, ModelError> {
    map.get(name).ok_or_else(|| ModelError::MissingWeight(name.to_string()))
}

/// Plain float evaluation.
pub struct FloatBackend<'a, T> {
    params: &'a IndexMap<String, Tensor<T>>,
}

impl<'a, T: Scalar> FloatBackend<'a, T> {
    pub fn new(params: &'a IndexMap<String, Tensor<T>>) -> Self {
        Self { params }
    }

    fn wb(&self, layer: &str) -> Result<(&'a Tensor<T>, &'a Tensor<T>), ModelError> {
        Ok((
            lookup(self.params, &format!("{layer}.weight"))?,
            lookup(self.params, &format!("{layer}.bias"))?,
        ))
    }
}

impl<T: Scalar> Backend for FloatBackend<'_, T> {
    type Value = Tensor<T>;

    fn conv(&mut self, layer: &str, x: &Tensor<T>, relu: bool) -> Result<Tensor<T>, ModelError> {
        let (w, b) = self.wb(layer)?;
        let y = tensor::conv2d(x, w, b, 1, Padding::Same)?;
        Ok(if relu { tensor::relu(&y) } else { y })
    }

    fn upconv(&mut self, layer: &str, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let (w, b) = self.wb(layer)?;
        Ok(tensor::transposed_conv2d(x, w, b, 2)?)
    }

    fn maxpool(&mut self, _layer: &str, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(tensor::maxpool2d(x)?.0)
    }

    fn concat(&mut self, _layer: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(tensor::concat_channels(a, b)?)
    }

    fn gap(&mut self, _layer: &str, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(tensor::global_avg_pool(x)?)
    }

    fn dense(&mut self, layer: &str, x: &Tensor<T>, act: DenseAct) -> Result<Tensor<T>, ModelError> {
        let (w, b) = self.wb(layer)?;
        let y = tensor::dense(x, w, b)?;
        Ok(match act {
            DenseAct::Relu => tensor::relu(&y),
            DenseAct::Sigmoid => tensor::sigmoid(&y),
        })
    }
}

/// Records the forward pass on a gradient tape in double precision.
pub struct TapeBackend<'t> {
    pub tape: &'t mut Tape,
    params: HashMap<String, Var>,
}

impl<'t> TapeBackend<'t> {
    /// Registers every parameter on the tape, in map order.
    pub fn new(tape: &'t mut Tape, params: &IndexMap<String, Tensor<f64>>) -> Self {
        let params = params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
            .collect();
        Self { tape, params }
    }

    fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingWeight(name.to_string()))
    }

    fn wb(&self, layer: &str) -> Result<(Var, Var), ModelError> {
        Ok((self.var(&format!("{layer}.weight"))?, self.var(&format!("{layer}.bias"))?))
    }
}

impl Backend for TapeBackend<'_> {
    type Value = Var;

    fn conv(&mut self, layer: &str, x: &Var, relu: bool) -> Result<Var, ModelError> {
        let (w, b) = self.wb(layer)?;
        let y = self.tape.conv2d(*x, w, b, 1, Padding::Same)?;
        Ok(if relu { self.tape.relu(y) } else { y })
    }

    fn upconv(&mut self, layer: &str, x: &Var) -> Result<Var, ModelError> {
        let (w, b) = self.wb(layer)?;
        Ok(self.tape.transposed_conv2d(*x, w, b, 2)?)
    }

    fn maxpool(&mut self, _layer: &str, x: &Var) -> Result<Var, ModelError> {
        Ok(self.tape.maxpool2d(*x)?)
    }

    fn concat(&mut self, _layer: &str, a: &Var, b: &Var) -> Result<Var, ModelError> {
        Ok(self.tape.concat_channels(*a, *b)?)
    }

    fn gap(&mut self, _layer: &str, x: &Var) -> Result<Var, ModelError> {
        Ok(self.tape.global_avg_pool(*x)?)
    }

    fn dense(&mut self, layer: &str, x: &Var, act: DenseAct) -> Result<Var, ModelError> {
        let (w, b) = self.wb(layer)?;
        let y = self.tape.dense(*x, w, b)?;
        Ok(match act {
            DenseAct::Relu => self.tape.relu(y),
            DenseAct::Sigmoid => self.tape.sigmoid(y),
        })
    }
}
