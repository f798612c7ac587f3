//! Gradient tape: records primitives as they execute and replays their
//! adjoints in reverse order.

use indexmap::IndexMap;

use super::ops::{self, Padding};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    },
    TransposedConv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat {
        a: Var,
        b: Var,
        ca: usize,
    },
    GlobalAvgPool(Var),
    /// Mean binary cross-entropy of sigmoid(logits) against fixed targets.
    Bce {
        logits: Var,
        targets: Tensor,
    },
    /// Mean squared error against a fixed target.
    Mse {
        pred: Var,
        target: Tensor,
    },
    Add(Var, Var),
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

/// Ordered record of executed primitives in double precision.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter gradients keyed by parameter name, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: IndexMap<String, Tensor>,
    visit_order: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Node indices whose adjoints were propagated, in visit order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }

    pub fn into_map(self) -> IndexMap<String, Tensor> {
        self.grads
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Registers a trainable tensor under `name`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        self.push(t, Op::Param(name.into()))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn transposed_conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let y = ops::transposed_conv2d(self.value(input), self.value(kernel), self.value(bias), stride)?;
        Ok(self.push(
            y,
            Op::TransposedConv2d {
                input,
                kernel,
                bias,
                stride,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d(self.value(input))?;
        Ok(self.push(y, Op::MaxPool { input, argmax }))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(y, Op::Dense { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = ops::relu(self.value(input));
        self.push(y, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let y = ops::sigmoid(self.value(input));
        self.push(y, Op::Sigmoid(input))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        let ca = self.value(a).shape()[1];
        Ok(self.push(y, Op::Concat { a, b, ca }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(y, Op::GlobalAvgPool(input)))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                left: x.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&s, &y)| {
                let p = ops::sigmoid_scalar(s).clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let v = Tensor::scalar(total / x.len() as f64);
        Ok(self.push(
            v,
            Op::Bce {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let x = self.value(pred);
        let d = x.sub(target).map_err(|_| TensorError::ShapeMismatch {
            op: "mse",
            left: x.shape().to_vec(),
            right: target.shape().to_vec(),
        })?;
        let v = Tensor::scalar(d.data().iter().map(|e| e * e).sum::<f64>() / d.len() as f64);
        Ok(self.push(
            v,
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let y = Tensor::scalar(self.value(input).sum());
        self.push(y, Op::Sum(input))
    }

    /// `Σ input ⊙ weights` with `weights` held fixed.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor) -> Result<Var> {
        let prod = self.value(input).zip_with("weighted_sum", weights, |a, b| a * b)?;
        let y = Tensor::scalar(prod.sum());
        Ok(self.push(
            y,
            Op::WeightedSum {
                input,
                weights: weights.clone(),
            },
        ))
    }

    /// Replays adjoints from `loss` back to every registered parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut visit_order = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            visit_order.push(idx);
            let node = &self.nodes[idx];
            let mut contrib: Vec<(Var, Tensor)> = Vec::with_capacity(3);
            match &node.op {
                Op::Constant => {}
                Op::Param(_) => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let (gx, gk, gb) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *padding,
                    )?;
                    contrib.extend([(*input, gx), (*kernel, gk), (*bias, gb)]);
                }
                Op::TransposedConv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                } => {
                    let (gx, gk, gb) = ops::transposed_conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                    )?;
                    contrib.extend([(*input, gx), (*kernel, gk), (*bias, gb)]);
                }
                Op::MaxPool { input, argmax } => {
                    let gx = ops::maxpool2d_backward(self.value(*input).shape(), argmax, &g);
                    contrib.push((*input, gx));
                }
                Op::Dense { input, weight, bias } => {
                    let (gx, gw, gb) = ops::dense_backward(self.value(*input), self.value(*weight), &g)?;
                    contrib.extend([(*input, gx), (*weight, gw), (*bias, gb)]);
                }
                Op::Relu(input) => {
                    let gx = self.value(*input).zip_with("relu", &g, |x, gy| if x > 0.0 { gy } else { 0.0 })?;
                    contrib.push((*input, gx));
                }
                Op::Sigmoid(input) => {
                    let gx = node.value.zip_with("sigmoid", &g, |s, gy| gy * s * (1.0 - s))?;
                    contrib.push((*input, gx));
                }
                Op::Concat { a, b, ca } => {
                    let (ga, gb) = ops::split_channels(&g, *ca)?;
                    contrib.extend([(*a, ga), (*b, gb)]);
                }
                Op::GlobalAvgPool(input) => {
                    let gx = ops::global_avg_pool_backward(self.value(*input).shape(), &g);
                    contrib.push((*input, gx));
                }
                Op::Bce { logits, targets } => {
                    let x = self.value(*logits);
                    let scale = g.data()[0] / x.len() as f64;
                    let gx = x.zip_with("bce", targets, |s, y| {
                        let p = ops::sigmoid_scalar(s);
                        if p > BCE_EPS && p < 1.0 - BCE_EPS {
                            (p - y) * scale
                        } else {
                            0.0
                        }
                    })?;
                    contrib.push((*logits, gx));
                }
                Op::Mse { pred, target } => {
                    let x = self.value(*pred);
                    let scale = 2.0 * g.data()[0] / x.len() as f64;
                    let gx = x.zip_with("mse", target, |a, b| (a - b) * scale)?;
                    contrib.push((*pred, gx));
                }
                Op::Add(a, b) => {
                    contrib.extend([(*a, g.clone()), (*b, g)]);
                }
                Op::Sum(input) => {
                    let gv = g.data()[0];
                    contrib.push((*input, Tensor::full(self.value(*input).shape(), gv)));
                }
                Op::WeightedSum { input, weights } => {
                    contrib.push((*input, weights.scale(g.data()[0])));
                }
            }
            for (v, t) in contrib {
                match &mut adj[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            }
        }

        let mut grads = IndexMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = adj
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                grads.insert(name.clone(), g);
            }
        }
        Ok(Gradients { grads, visit_order })
    }
}

/// Free-function form of [`Tape::backward`].
pub fn backward(tape: &Tape, loss: Var) -> Result<Gradients> {
    tape.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_case_gradient_is_input() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let w = tape.param("w", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let loss = tape.weighted_sum(w, &x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap(), &x);
    }

    #[test]
    fn non_participating_param_gets_zero() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::full(&[2], 1.0));
        let _b = tape.param("b", Tensor::full(&[2, 2], 1.0));
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("b").unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(g.get("a").unwrap(), &Tensor::full(&[2], 1.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::full(&[2], 1.0));
        let r = tape.relu(a);
        assert!(matches!(tape.backward(r), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_is_identical_and_reverse_ordered() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.37).sin()));
        let k = tape.param("k", Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.11).cos()));
        let b = tape.param("b", Tensor::zeros(&[3]));
        let y = tape.conv2d(x, k, b, 1, Padding::Same).unwrap();
        let r = tape.relu(y);
        let loss = tape.sum(r);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.visit_order().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(g1.visit_order()[0], loss.index());
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::full(&[2], 2.0));
        let s = tape.add(w, w).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[2.0, 2.0]);
    }
}
