//! Adam training of the multitask objective and split evaluation.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{derive_seed, Sample};
use crate::metrics::{EvalAccumulator, EvalReport, MetricError};
use crate::model::{self, ModelError, ModelWeights, TapeBackend};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("sample {id} is {got}×{got}, model expects {expected}×{expected}")]
    SizeMismatch { id: String, got: usize, expected: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 10,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(TrainError::InvalidConfig("Adam moments must lie in [0,1) and epsilon > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the per-batch multitask loss.
    pub loss: f64,
    pub bce: f64,
    pub mse: f64,
    pub val_iou: Option<f64>,
    pub val_mae_px: Option<f64>,
    pub val_mae_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub optimizer: String,
    pub config: TrainConfig,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs: Vec<EpochRecord>,
}

/// Image, mask and normalized fossa target tensors for a batch.
pub fn batch_tensors(samples: &[&Sample]) -> (Tensor, Tensor, Tensor) {
    let s = samples[0].size();
    let n = samples.len();
    let mut img = Vec::with_capacity(n * s * s);
    let mut mask = Vec::with_capacity(n * s * s);
    let mut fossa = Vec::with_capacity(n * 3);
    for smp in samples {
        img.extend(smp.image.to_input());
        mask.extend(smp.vein_mask.data.iter().map(|&v| v as f64));
        fossa.extend(smp.fossa_target());
    }
    (
        Tensor::new(vec![n, 1, s, s], img).expect("batch dims"),
        Tensor::new(vec![n, 1, s, s], mask).expect("batch dims"),
        Tensor::new(vec![n, 3], fossa).expect("batch dims"),
    )
}

struct Adam {
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &IndexMap<String, Tensor>) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut IndexMap<String, Tensor>, grads: &IndexMap<String, Tensor>, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name).expect("moment per param");
            let v = self.v.get_mut(name).expect("moment per param");
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Loss terms and parameter gradients of one batch.
pub fn loss_and_grads(
    cfg: &model::UNetConfig,
    params: &IndexMap<String, Tensor>,
    batch: &[&Sample],
) -> Result<(f64, f64, IndexMap<String, Tensor>), TrainError> {
    let (x, y, f) = batch_tensors(batch);
    let mut tape = Tape::new();
    let (bce, mse, loss) = {
        let mut b = TapeBackend::new(&mut tape, params);
        let input = b.tape.constant(x);
        let (logits, fossa) = model::run(&mut b, cfg, input)?;
        let bce = b.tape.bce_with_logits(logits, &y)?;
        let mse = b.tape.mse(fossa, &f)?;
        let loss = b.tape.add(bce, mse)?;
        (bce, mse, loss)
    };
    let grads = tape.backward(loss)?;
    let bv = tape.value(bce).item().expect("scalar");
    let mv = tape.value(mse).item().expect("scalar");
    Ok((bv, mv, grads.into_map()))
}

/// Multitask loss of the float64 model on `samples` as one batch.
pub fn batch_loss(weights: &ModelWeights, samples: &[&Sample]) -> Result<f64, TrainError> {
    let params = weights.cast::<f64>();
    let (x, y, f) = batch_tensors(samples);
    let (logits, fossa) = model::forward_with(&weights.config, &params, &x)?;
    Ok(crate::metrics::multitask_loss(&logits, &y, &fossa, &f)?)
}

fn check_sizes(weights: &ModelWeights, set: &[Sample]) -> Result<(), TrainError> {
    let expected = weights.config.input_size;
    for s in set {
        if s.image.width != expected || s.image.height != expected {
            return Err(TrainError::SizeMismatch {
                id: s.id.clone(),
                got: s.image.width,
                expected,
            });
        }
    }
    Ok(())
}

/// Runs `predict` over `samples` in batches and accumulates metrics.
pub fn evaluate_with<E>(
    samples: &[Sample],
    batch_size: usize,
    mut predict: impl FnMut(&Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>), E>,
) -> Result<EvalReport, E>
where
    E: From<MetricError>,
{
    let mut acc = EvalAccumulator::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _, _) = batch_tensors(&refs);
        let (logits, fossa) = predict(&x.cast())?;
        let s = chunk[0].size();
        let plane = s * s;
        for (i, smp) in chunk.iter().enumerate() {
            let l: Vec<f64> = logits.data()[i * plane..][..plane].iter().map(|&v| v as f64).collect();
            let fp = &fossa.data()[i * 3..][..3];
            acc.add(
                &l,
                &smp.vein_mask.data,
                [fp[0] as f64, fp[1] as f64, fp[2] as f64],
                smp.fossa_target(),
                s,
            )?;
        }
    }
    Ok(acc.finish())
}

/// Float32 evaluation of `weights` on `samples`.
pub fn evaluate(weights: &ModelWeights, samples: &[Sample], batch_size: usize) -> Result<EvalReport, TrainError> {
    check_sizes(weights, samples)?;
    evaluate_with(samples, batch_size, |x| model::forward(weights, x).map_err(TrainError::from))
}

pub fn train(
    weights: &ModelWeights,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ModelWeights, TrainLog), TrainError> {
    train_with(weights, train_set, val_set, cfg, |_, _| Ok(()))
}

/// As [`train`], calling `on_epoch` with each finished epoch's record and
/// the current weights.
pub fn train_with(
    weights: &ModelWeights,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelWeights) -> Result<(), TrainError>,
) -> Result<(ModelWeights, TrainLog), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_sizes(weights, train_set)?;
    check_sizes(weights, val_set)?;

    let mcfg = weights.config;
    let mut params = weights.cast::<f64>();
    let mut adam = Adam::new(&params);
    let mut log = TrainLog {
        optimizer: format!(
            "adam(lr={}, beta1={}, beta2={}, eps={})",
            cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon
        ),
        config: cfg.clone(),
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut current = weights.clone();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let (mut bce_sum, mut mse_sum) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (bce, mse, grads) = loss_and_grads(&mcfg, &params, &batch)?;
            bce_sum += bce * batch.len() as f64;
            mse_sum += mse * batch.len() as f64;
            adam.step(&mut params, &grads, cfg);
        }
        let n = train_set.len() as f64;
        current = ModelWeights::from_tensors(mcfg, params.iter().map(|(k, t)| (k.clone(), t.cast())).collect())?;
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&current, val_set, cfg.batch_size)?)
        };
        let rec = EpochRecord {
            epoch,
            loss: bce_sum / n + mse_sum / n,
            bce: bce_sum / n,
            mse: mse_sum / n,
            val_iou: val.as_ref().map(|r| r.iou),
            val_mae_px: val.as_ref().map(|r| r.mae_px),
            val_mae_deg: val.as_ref().map(|r| r.mae_deg),
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.5} (bce {:.5}, mse {:.5}){}",
            cfg.epochs,
            rec.loss,
            rec.bce,
            rec.mse,
            rec.val_iou.map(|v| format!(", val IoU {v:.4}")).unwrap_or_default()
        );
        on_epoch(&rec, &current)?;
        log.epochs.push(rec);
    }
    Ok((current, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::model::UNetConfig;

    fn tiny() -> UNetConfig {
        UNetConfig {
            input_size: 32,
            depth: 2,
            base_channels: 4,
            regression_hidden: 8,
            regression_dim: 3,
        }
    }

    #[test]
    fn zero_rate_keeps_weights() {
        let w = model::build(&tiny(), 1).unwrap();
        let data = synth_generate(5, 32, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (out, log) = train(&w, &data, &[], &cfg).unwrap();
        assert_eq!(out, w);
        assert_eq!(log.epochs.len(), 1);
    }

    #[test]
    fn small_step_descends() {
        let w = model::build(&tiny(), 2).unwrap();
        let data = synth_generate(1, 32, 5).unwrap();
        let before = batch_loss(&w, &[&data[0]]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            epochs: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let (out, _) = train(&w, &data, &[], &cfg).unwrap();
        let after = batch_loss(&out, &[&data[0]]).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn reproducible_and_every_tensor_moves() {
        let w = model::build(&tiny(), 3).unwrap();
        let data = synth_generate(6, 32, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let (a, la) = train(&w, &data[..5], &data[5..], &cfg).unwrap();
        let (b, lb) = train(&w, &data[..5], &data[5..], &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            let d = t.sub(w.get(name).unwrap()).unwrap().max_abs();
            assert!(d > 0.0, "{name} did not move");
        }
        let r = &la.epochs[0];
        assert!((r.loss - (r.bce + r.mse)).abs() <= 1e-9);
        assert!(r.val_iou.is_some());
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let w = model::build(&tiny(), 1).unwrap();
        assert!(matches!(train(&w, &[], &[], &TrainConfig::default()), Err(TrainError::EmptyDataset)));
        let data = synth_generate(2, 48, 1).unwrap();
        assert!(matches!(
            train(&w, &data, &[], &TrainConfig::default()),
            Err(TrainError::SizeMismatch { .. })
        ));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train(&w, &synth_generate(2, 32, 1).unwrap(), &[], &bad).is_err());
    }
}
