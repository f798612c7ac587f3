//! Losses (BCE, MSE, MAE, multitask) and binary segmentation metrics
//! (pixel accuracy, IoU, Dice, F1, PSNR).

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::tape::BCE_EPS;
use crate::tensor::Tensor;

/// Probability threshold separating vein from background.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: length mismatch {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{op}: non-binary value {value} at index {index}")]
    NonBinary {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if a.is_empty() {
        return Err(MetricError::Empty(op));
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
pub fn bce(logits: &Tensor, targets: &Tensor) -> Result<f64, MetricError> {
    same_shape("bce", logits, targets)?;
    let mut total = 0.0;
    for (i, (&s, &y)) in logits.data().iter().zip(targets.data()).enumerate() {
        if y != 0.0 && y != 1.0 {
            return Err(MetricError::NonBinary {
                op: "bce",
                index: i,
                value: y,
            });
        }
        let p = sigmoid_scalar(s).clamp(BCE_EPS, 1.0 - BCE_EPS);
        total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Ok(total / logits.len() as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    same_shape("mse", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    same_shape("mae", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Unweighted sum of segmentation BCE and fossa MSE.
pub fn multitask_loss(
    logits: &Tensor,
    mask_target: &Tensor,
    fossa_pred: &Tensor,
    fossa_target: &Tensor,
) -> Result<f64, MetricError> {
    Ok(bce(logits, mask_target)? + mse(fossa_pred, fossa_target)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Pixel confusion counts of a predicted against a ground-truth mask; both
/// hold 0/1 values.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch {
            op: "confusion",
            left: pred.len(),
            right: gt.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        for v in [p, g] {
            if v > 1 {
                return Err(MetricError::NonBinary {
                    op: "confusion",
                    index: i,
                    value: v as f64,
                });
            }
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Thresholds sigmoid probabilities of `logits` into a 0/1 mask.
pub fn threshold_logits(logits: &[f64]) -> Vec<u8> {
    // sigmoid(s) > 0.5 <=> s > 0
    logits.iter().map(|&s| u8::from(sigmoid_scalar(s) > MASK_THRESHOLD)).collect()
}

/// Segmentation metrics derived from confusion counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub pixel_accuracy: f64,
    pub iou: f64,
    pub dice: f64,
    pub f1: f64,
    pub psnr_db: f64,
}

impl SegMetrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let (tp, tn, fp, fnn) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
        let total = tp + tn + fp + fnn;
        let pixel_accuracy = if total > 0.0 { (tp + tn) / total } else { 1.0 };
        let union = tp + fp + fnn;
        let iou = if union > 0.0 { tp / union } else { 1.0 };
        // |P| + |G| = 2tp + fp + fn
        let dice = if union > 0.0 { 2.0 * tp / (2.0 * tp + fp + fnn) } else { 1.0 };
        let f1 = if union > 0.0 { 2.0 * tp / (2.0 * tp + fp + fnn) } else { 1.0 };
        // Masks on a 0/255 scale: every disagreeing pixel contributes 255².
        let mse255 = if total > 0.0 { (fp + fnn) * 255.0 * 255.0 / total } else { 0.0 };
        let psnr_db = psnr_from_mse(mse255);
        Self {
            pixel_accuracy,
            iou,
            dice,
            f1,
            psnr_db,
        }
    }
}

/// `10·log10(255²/mse)`; zero error maps to +∞.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_s: f64,
    pub fps: f64,
    pub runs: usize,
}

impl LatencyStats {
    pub fn from_median(median_s: f64, runs: usize) -> Self {
        Self {
            median_s,
            fps: 1.0 / median_s,
            runs,
        }
    }
}

/// All evaluation metrics for one (model, dataset, scheme) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub iou: f64,
    pub dice: f64,
    #[serde(serialize_with = "ser_inf", deserialize_with = "de_inf")]
    pub psnr_db: f64,
    pub pixel_accuracy: f64,
    pub f1: f64,
    /// Fossa MSE on the normalized (0,1) targets.
    pub mse: f64,
    /// Fossa MAE on the normalized (0,1) targets.
    pub mae: f64,
    /// Fossa MSE with coordinates in pixels and angle in degrees.
    pub mse_unnormalized: f64,
    /// Fossa MAE with coordinates in pixels and angle in degrees.
    pub mae_unnormalized: f64,
    /// Mean absolute centroid error per coordinate, pixels.
    pub mae_px: f64,
    /// Mean axial angle error, degrees.
    pub mae_deg: f64,
    pub bce: f64,
    pub multitask_loss: f64,
    pub counts: ConfusionCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

fn ser_inf<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_inf<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) if s == "inf" => Ok(f64::INFINITY),
        Num::S(s) => Err(serde::de::Error::custom(format!("invalid number {s}"))),
    }
}

/// Smallest difference between two undirected orientations in degrees.
pub fn axial_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// Accumulates predictions over a split and produces an [`EvalReport`].
#[derive(Debug, Clone, Default)]
pub struct EvalAccumulator {
    counts: ConfusionCounts,
    bce_sum: f64,
    bce_n: usize,
    sq: f64,
    abs: f64,
    sq_units: f64,
    abs_units: f64,
    abs_px: f64,
    abs_deg: f64,
    fossa_n: usize,
    samples: usize,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one sample: segmentation logits and 0/1 target of equal length,
    /// and normalized fossa prediction/target `(cx/S, cy/S, angle/180)`.
    pub fn add(
        &mut self,
        logits: &[f64],
        target: &[u8],
        fossa_pred: [f64; 3],
        fossa_target: [f64; 3],
        image_size: usize,
    ) -> Result<(), MetricError> {
        let pred = threshold_logits(logits);
        self.counts.merge(&confusion(&pred, target)?);
        let lt = Tensor::new(vec![logits.len()], logits.to_vec()).expect("1-d");
        let tt = Tensor::new(vec![target.len()], target.iter().map(|&v| v as f64).collect()).expect("1-d");
        self.bce_sum += bce(&lt, &tt)?;
        self.bce_n += 1;
        self.add_fossa(fossa_pred, fossa_target, image_size);
        self.samples += 1;
        Ok(())
    }

    /// Adds a mask-only comparison (no logits or fossa available).
    pub fn add_mask(&mut self, pred: &[u8], target: &[u8]) -> Result<(), MetricError> {
        self.counts.merge(&confusion(pred, target)?);
        self.samples += 1;
        Ok(())
    }

    fn add_fossa(&mut self, p: [f64; 3], t: [f64; 3], size: usize) {
        let units = [size as f64, size as f64, 180.0];
        for k in 0..3 {
            let d = p[k] - t[k];
            self.sq += d * d;
            self.abs += d.abs();
            let du = d * units[k];
            self.sq_units += du * du;
            self.abs_units += du.abs();
        }
        self.abs_px += ((p[0] - t[0]).abs() + (p[1] - t[1]).abs()) * size as f64 / 2.0;
        self.abs_deg += axial_diff_deg(p[2] * 180.0, t[2] * 180.0);
        self.fossa_n += 1;
    }

    pub fn counts(&self) -> ConfusionCounts {
        self.counts
    }

    pub fn finish(&self) -> EvalReport {
        let m = SegMetrics::from_counts(&self.counts);
        let nf = (self.fossa_n * 3).max(1) as f64;
        let n = self.fossa_n.max(1) as f64;
        let bce = if self.bce_n > 0 { self.bce_sum / self.bce_n as f64 } else { 0.0 };
        let mse = self.sq / nf;
        EvalReport {
            samples: self.samples,
            iou: m.iou,
            dice: m.dice,
            psnr_db: m.psnr_db,
            pixel_accuracy: m.pixel_accuracy,
            f1: m.f1,
            mse,
            mae: self.abs / nf,
            mse_unnormalized: self.sq_units / nf,
            mae_unnormalized: self.abs_units / nf,
            mae_px: self.abs_px / n,
            mae_deg: self.abs_deg / n,
            bce,
            multitask_loss: bce + mse,
            counts: self.counts,
            latency: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!((bce(&v(&[0.0]), &v(&[1.0])).unwrap() - 0.693147).abs() < 1e-6);
        assert!(bce(&v(&[20.0]), &v(&[1.0])).unwrap() < 1e-6);
        assert!(bce(&v(&[0.0]), &v(&[0.5])).is_err());
        assert!(bce(&v(&[0.0, 1.0]), &v(&[1.0])).is_err());
    }

    #[test]
    fn mse_mae_examples() {
        let a = v(&[0.0, 2.0]);
        let b = v(&[1.0, 1.0]);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert_eq!(mae(&a, &b).unwrap(), 1.0);
        let a = v(&[0.0, 3.0]);
        let b = v(&[0.0, 0.0]);
        assert_eq!(mse(&a, &b).unwrap(), 4.5);
        assert_eq!(mae(&a, &b).unwrap(), 1.5);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn multitask_is_plain_sum() {
        let logits = v(&[0.3, -1.2, 2.0]);
        let mask = v(&[1.0, 0.0, 1.0]);
        let fp = v(&[0.2, 0.4, 0.9]);
        let ft = v(&[0.25, 0.5, 0.7]);
        let total = multitask_loss(&logits, &mask, &fp, &ft).unwrap();
        assert_eq!(total, bce(&logits, &mask).unwrap() + mse(&fp, &ft).unwrap());

        let perfect = multitask_loss(&v(&[30.0, -30.0]), &v(&[1.0, 0.0]), &ft, &ft).unwrap();
        assert!(perfect < 1e-6);
    }

    #[test]
    fn confusion_examples() {
        let mut m = vec![0u8; 16];
        for i in [0, 3, 5, 9, 15] {
            m[i] = 1;
        }
        let c = confusion(&m, &m).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (5, 11, 0, 0));
        let c = confusion(&[1; 16], &[0; 16]).unwrap();
        assert_eq!(c.fp, 16);
        assert!(confusion(&[2], &[0]).is_err());
    }

    #[test]
    fn metric_examples() {
        let mut m = vec![0u8; 16];
        m[5] = 1;
        m[6] = 1;
        let s = SegMetrics::from_counts(&confusion(&m, &m).unwrap());
        assert_eq!((s.iou, s.dice, s.f1, s.pixel_accuracy), (1.0, 1.0, 1.0, 1.0));
        assert!(s.psnr_db.is_infinite());

        // 2×2 blocks on a 4×4 grid offset by one column: overlap 2, union 6.
        let a: Vec<u8> = (0..16).map(|i| u8::from((i / 4) < 2 && (i % 4) < 2)).collect();
        let b: Vec<u8> = (0..16).map(|i| u8::from((i / 4) < 2 && (1..3).contains(&(i % 4)))).collect();
        let s = SegMetrics::from_counts(&confusion(&a, &b).unwrap());
        assert!((s.iou - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.dice - 0.5).abs() < 1e-15);
        assert!((s.f1 - 0.5).abs() < 1e-15);

        let inv: Vec<u8> = a.iter().map(|&x| 1 - x).collect();
        let s = SegMetrics::from_counts(&confusion(&a, &inv).unwrap());
        assert_eq!(s.psnr_db, 0.0);

        let s = SegMetrics::from_counts(&confusion(&[0; 4], &[0; 4]).unwrap());
        assert_eq!(s.iou, 1.0);
    }

    #[test]
    fn psnr_serializes_inf_as_string() {
        let mut acc = EvalAccumulator::new();
        acc.add_mask(&[1, 0], &[1, 0]).unwrap();
        let r = acc.finish();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["psnr_db"], "inf");
        for key in ["iou", "dice", "psnr_db", "pixel_accuracy", "f1", "mse", "mae"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let back: EvalReport = serde_json::from_value(json).unwrap();
        assert!(back.psnr_db.is_infinite());
    }

    #[test]
    fn axial_difference_wraps() {
        assert_eq!(axial_diff_deg(1.0, 179.0), 2.0);
        assert_eq!(axial_diff_deg(30.0, 150.0), 60.0);
    }
}
