//! Dataset records, the on-disk layout, deterministic splitting and the
//! synthetic forearm generator.
//!
//! On disk a dataset is a directory holding `images/`, `masks_vein/`,
//! `masks_arm/` (and optionally `masks_fossa/`) with one `{id}.png` per
//! sample, plus `annotations.csv` with header
//! `id,cx,cy,bbox_x,bbox_y,bbox_w,bbox_h,angle_deg`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, GrayImage, ImagingError, Mask};
use crate::tensor::Tensor;

pub const ANNOTATIONS: &str = "annotations.csv";
pub const IMAGES_DIR: &str = "images";
pub const VEIN_DIR: &str = "masks_vein";
pub const ARM_DIR: &str = "masks_arm";
pub const FOSSA_DIR: &str = "masks_fossa";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{} problem(s) loading dataset:\n{}", .0.len(), .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n"))]
    Rows(Vec<RowError>),
    #[error("dataset root {0} not found or missing {1}")]
    MissingRoot(PathBuf, &'static str),
    #[error("split needs at least 10 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid sample {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub id: String,
    pub message: String,
}

impl std::fmt::Display for RowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "row {} (id {}): {}", self.row, self.id, self.message)
    }
}

/// Axis-aligned box `(x, y, w, h)` in pixels.
pub type BBox = (usize, usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub vein_mask: Mask,
    pub arm_mask: Mask,
    pub fossa_mask: Mask,
    pub bbox: BBox,
    pub centroid: (f64, f64),
    /// Arm orientation in `[0, 180)` degrees.
    pub angle: f64,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.width
    }

    pub fn validate(&self) -> Result<(), String> {
        let (w, h) = (self.image.width, self.image.height);
        for (name, m) in [
            ("vein", &self.vein_mask),
            ("arm", &self.arm_mask),
            ("fossa", &self.fossa_mask),
        ] {
            if (m.width, m.height) != (w, h) {
                return Err(format!(
                    "{name} mask is {}×{}, image is {w}×{h}",
                    m.width, m.height
                ));
            }
        }
        let (bx, by, bw, bh) = self.bbox;
        let (cx, cy) = self.centroid;
        if !(cx >= bx as f64 && cx <= (bx + bw) as f64 && cy >= by as f64 && cy <= (by + bh) as f64) {
            return Err(format!("centroid ({cx}, {cy}) outside bbox {:?}", self.bbox));
        }
        if !self.vein_mask.is_subset_of(&self.arm_mask) {
            return Err("vein mask not contained in arm mask".into());
        }
        if !(0.0..180.0).contains(&self.angle) {
            return Err(format!("angle {} outside [0,180)", self.angle));
        }
        Ok(())
    }

    /// Regression target `(cx/S, cy/S, angle/180)`.
    pub fn fossa_target(&self) -> [f64; 3] {
        let s = self.size() as f64;
        [self.centroid.0 / s, self.centroid.1 / s, self.angle / 180.0]
    }

    pub fn image_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.image.height, self.image.width], self.image.to_input()).expect("image dims")
    }

    pub fn vein_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, 1, self.vein_mask.height, self.vein_mask.width],
            self.vein_mask.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("mask dims")
    }

    /// Applies CLAHE and/or a square resize to every field.
    pub fn preprocess(&self, opts: &Preprocess) -> Result<Sample, ImagingError> {
        let mut s = self.clone();
        if opts.clahe {
            s.image = imaging::clahe(&s.image, opts.clip_limit, opts.tiles)?;
        }
        if let Some(t) = opts.resize {
            if s.image.width != t || s.image.height != t {
                let (sx, sy) = (t as f64 / s.image.width as f64, t as f64 / s.image.height as f64);
                s.image = imaging::resize(&s.image, t);
                s.vein_mask = imaging::resize_mask(&s.vein_mask, t).and(&imaging::resize_mask(&s.arm_mask, t));
                s.arm_mask = imaging::resize_mask(&s.arm_mask, t);
                s.fossa_mask = imaging::resize_mask(&s.fossa_mask, t);
                s.centroid = (s.centroid.0 * sx, s.centroid.1 * sy);
                let (bx, by, bw, bh) = s.bbox;
                let x0 = (bx as f64 * sx).floor() as usize;
                let y0 = (by as f64 * sy).floor() as usize;
                let x1 = ((bx + bw) as f64 * sx).ceil() as usize;
                let y1 = ((by + bh) as f64 * sy).ceil() as usize;
                s.bbox = (x0, y0, x1 - x0, y1 - y0);
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocess {
    pub clahe: bool,
    pub clip_limit: f64,
    pub tiles: (usize, usize),
    pub resize: Option<usize>,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            clahe: false,
            clip_limit: imaging::clahe::DEFAULT_CLIP_LIMIT,
            tiles: imaging::clahe::DEFAULT_TILES,
            resize: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Row {
    id: String,
    cx: f64,
    cy: f64,
    bbox_x: usize,
    bbox_y: usize,
    bbox_w: usize,
    bbox_h: usize,
    angle_deg: f64,
}

/// Rounds to the two decimals stored in the annotation file.
pub fn round_angle(a: f64) -> f64 {
    let r = (a * 100.0).round() / 100.0;
    if r >= 180.0 {
        0.0
    } else {
        r
    }
}

fn png_path(root: &Path, dir: &str, id: &str) -> PathBuf {
    root.join(dir).join(format!("{id}.png"))
}

/// Filled ellipse inscribed in `bbox`; used when no fossa mask is stored.
pub fn ellipse_in_bbox(width: usize, height: usize, bbox: BBox) -> Mask {
    let (bx, by, bw, bh) = bbox;
    let (cx, cy) = (bx as f64 + (bw as f64 - 1.0) / 2.0, by as f64 + (bh as f64 - 1.0) / 2.0);
    let (rx, ry) = ((bw as f64 / 2.0).max(0.5), (bh as f64 / 2.0).max(0.5));
    Mask::from_fn(width, height, |x, y| {
        let dx = (x as f64 - cx) / rx;
        let dy = (y as f64 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    })
}

fn load_row(root: &Path, row: &Row) -> Result<Sample, String> {
    let load_mask = |dir: &str| {
        let p = png_path(root, dir, &row.id);
        if !p.exists() {
            return Err(format!("missing file {}", p.display()));
        }
        Mask::load_png(&p).map_err(|e| e.to_string())
    };
    let img_path = png_path(root, IMAGES_DIR, &row.id);
    if !img_path.exists() {
        return Err(format!("missing file {}", img_path.display()));
    }
    let image = GrayImage::load_png(&img_path).map_err(|e| e.to_string())?;
    let vein_mask = load_mask(VEIN_DIR)?;
    let arm_mask = load_mask(ARM_DIR)?;
    let bbox = (row.bbox_x, row.bbox_y, row.bbox_w, row.bbox_h);
    let fossa_mask = if png_path(root, FOSSA_DIR, &row.id).exists() {
        load_mask(FOSSA_DIR)?
    } else {
        ellipse_in_bbox(image.width, image.height, bbox)
    };
    let s = Sample {
        id: row.id.clone(),
        image,
        vein_mask,
        arm_mask,
        fossa_mask,
        bbox,
        centroid: (row.cx, row.cy),
        angle: row.angle_deg,
    };
    s.validate().map_err(|e| format!("invariant violation: {e}"))?;
    Ok(s)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Sample>, DataError> {
    load_dataset_with(root, &Preprocess::default())
}

/// Loads every annotated sample in CSV order, collecting all per-row
/// problems into a single error.
pub fn load_dataset_with(root: &Path, opts: &Preprocess) -> Result<Vec<Sample>, DataError> {
    let csv_path = root.join(ANNOTATIONS);
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.to_path_buf(), "directory"));
    }
    if !csv_path.is_file() {
        return Err(DataError::MissingRoot(root.to_path_buf(), ANNOTATIONS));
    }
    let mut reader = csv::Reader::from_path(&csv_path)?;
    let headers = reader.headers()?.clone();
    let expected = ["id", "cx", "cy", "bbox_x", "bbox_y", "bbox_w", "bbox_h", "angle_deg"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(DataError::Rows(vec![RowError {
            row: 0,
            id: "<header>".into(),
            message: format!("expected header {}", expected.join(",")),
        }]));
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        match rec.and_then(|r| r.deserialize::<Row>(Some(&headers))) {
            Ok(r) => rows.push((i + 1, r)),
            Err(e) => errors.push(RowError {
                row: i + 1,
                id: "?".into(),
                message: format!("malformed row: {e}"),
            }),
        }
    }
    let loaded: Vec<Result<Sample, RowError>> = rows
        .par_iter()
        .map(|(n, r)| {
            load_row(root, r)
                .and_then(|s| s.preprocess(opts).map_err(|e| e.to_string()))
                .map_err(|message| RowError {
                    row: *n,
                    id: r.id.clone(),
                    message,
                })
        })
        .collect();
    let mut samples = Vec::with_capacity(loaded.len());
    for r in loaded {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        errors.sort_by_key(|e| e.row);
        return Err(DataError::Rows(errors));
    }
    Ok(samples)
}

fn annotations_csv(samples: &[Sample]) -> Result<Vec<u8>, DataError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "cx", "cy", "bbox_x", "bbox_y", "bbox_w", "bbox_h", "angle_deg"])?;
    for s in samples {
        w.write_record([
            s.id.clone(),
            format!("{}", s.centroid.0),
            format!("{}", s.centroid.1),
            s.bbox.0.to_string(),
            s.bbox.1.to_string(),
            s.bbox.2.to_string(),
            s.bbox.3.to_string(),
            format!("{:.2}", s.angle),
        ])?;
    }
    w.into_inner().map_err(|e| DataError::Io(e.into_error()))
}

/// Writes the directory layout and annotation file. Every file is written
/// atomically; the CSV goes last.
pub fn save_dataset(samples: &[Sample], root: &Path) -> Result<(), DataError> {
    for d in [IMAGES_DIR, VEIN_DIR, ARM_DIR, FOSSA_DIR] {
        fs::create_dir_all(root.join(d))?;
    }
    samples.par_iter().try_for_each(|s| -> Result<(), DataError> {
        s.image.save_png(&png_path(root, IMAGES_DIR, &s.id))?;
        s.vein_mask.save_png(&png_path(root, VEIN_DIR, &s.id))?;
        s.arm_mask.save_png(&png_path(root, ARM_DIR, &s.id))?;
        s.fossa_mask.save_png(&png_path(root, FOSSA_DIR, &s.id))?;
        Ok(())
    })?;
    crate::format::write_atomic(&root.join(ANNOTATIONS), &annotations_csv(samples)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Sizes `(train, val, test)` = `(⌊0.7n⌋, ⌊0.2n⌋, rest)`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n * 2 / 10;
    (train, val, n - train - val)
}

pub fn split_ids(ids: &[String], seed: u64) -> Result<SplitManifest, DataError> {
    let n = ids.len();
    if n < 10 {
        return Err(DataError::TooFewSamples(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, va, _) = split_sizes(n);
    let pick = |r: &[usize]| r.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    Ok(SplitManifest {
        seed,
        train: pick(&order[..tr]),
        val: pick(&order[tr..tr + va]),
        test: pick(&order[tr + va..]),
    })
}

pub fn split(samples: &[Sample], seed: u64) -> Result<SplitManifest, DataError> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    split_ids(&ids, seed)
}

/// Selects the samples named in `ids`, in that order.
pub fn select<'a>(samples: &'a [Sample], ids: &[String]) -> Vec<&'a Sample> {
    let index: std::collections::HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect()
}

/// Per-item RNG seed derived from a global seed and an index, so that
/// parallel and serial generation agree.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Knobs of the synthetic forearm generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Arm angle range in degrees.
    pub angle_range: (f64, f64),
    /// Arm axis offset from the image centre, as a fraction of the size.
    pub center_jitter: f64,
    /// Arm half-width range as a fraction of the size.
    pub half_width: (f64, f64),
    /// Fossa offset along the arm axis, as a fraction of the size.
    pub fossa_offset: f64,
    /// Fossa disc radius as a fraction of the size.
    pub fossa_radius: f64,
    /// Vein thickness as a fraction of the size.
    pub vein_width: f64,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            angle_range: (30.0, 150.0),
            center_jitter: 0.08,
            half_width: (0.18, 0.22),
            fossa_offset: 0.12,
            fossa_radius: 0.07,
            vein_width: 0.06,
            noise_sigma: 5.0,
        }
    }
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Generates one synthetic forearm sample.
pub fn synth_sample(id: String, size: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Sample {
    let s = size as f64;
    let angle = round_angle(rng.random_range(spec.angle_range.0..spec.angle_range.1));
    let (sn, cs) = angle.to_radians().sin_cos();
    // displayed-counterclockwise direction in y-down coordinates
    let dir = (cs, -sn);
    let nrm = (sn, cs);
    let c = (s - 1.0) / 2.0;
    let j = spec.center_jitter * s;
    let p = (c + rng.random_range(-j..=j), c + rng.random_range(-j..=j));
    let hw = s * rng.random_range(spec.half_width.0..spec.half_width.1);
    let along = |x: f64, y: f64| (x - p.0) * dir.0 + (y - p.1) * dir.1;
    let across = |x: f64, y: f64| (x - p.0) * nrm.0 + (y - p.1) * nrm.1;
    let arm_mask = Mask::from_fn(size, size, |x, y| across(x as f64, y as f64).abs() <= hw);

    let t = rng.random_range(-spec.fossa_offset..=spec.fossa_offset) * s;
    let fc = (p.0 + t * dir.0, p.1 + t * dir.1);
    let r = (spec.fossa_radius * s).max(2.5);
    let fossa_mask = Mask::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 - fc.0, y as f64 - fc.1);
        (dx * dx + dy * dy).sqrt() <= r
    })
    .and(&arm_mask);
    let bbox = fossa_mask.bbox().expect("fossa disc lies inside the arm");
    let centroid = fossa_mask.centroid().expect("non-empty fossa");

    // Longitudinal veins near both arm edges joined by an oblique vein
    // through the fossa.
    let point = |a: f64, b: f64| (p.0 + a * dir.0 + b * nrm.0, p.1 + a * dir.1 + b * nrm.1);
    let span = s * 1.5;
    let off1 = hw * rng.random_range(0.45..0.65);
    let off2 = -hw * rng.random_range(0.45..0.65);
    let wiggle = rng.random_range(0.0..0.08) * hw;
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut segments = Vec::new();
    let steps = 12;
    for k in 0..steps {
        let a0 = -span / 2.0 + span * k as f64 / steps as f64;
        let a1 = a0 + span / steps as f64;
        let wob = |a: f64| wiggle * (a / s * 6.0 + phase).sin();
        segments.push((point(a0, off1 + wob(a0)), point(a1, off1 + wob(a1))));
        segments.push((point(a0, off2 - wob(a0)), point(a1, off2 - wob(a1))));
    }
    let lean = rng.random_range(0.6..1.2) * hw * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    segments.push((point(t - lean, off2), point(t + lean, off1)));
    if rng.random_bool(0.5) {
        // short branch from the oblique vein
        let b = rng.random_range(0.2..0.5) * s * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        segments.push((point(t, (off1 + off2) / 2.0), point(t + b, off1 * 0.3)));
    }
    let vw = (spec.vein_width * s).max(1.5) / 2.0;
    let inner = |x: f64, y: f64| across(x, y).abs() <= hw - 1.5;
    let vein_mask = Mask::from_fn(size, size, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        inner(xf, yf) && segments.iter().any(|&(a, b)| dist_to_segment(xf, yf, a, b) <= vw)
    });

    let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
    let gx = rng.random_range(-25.0..25.0);
    let gy = rng.random_range(-25.0..25.0);
    let arm_level = rng.random_range(150.0..180.0);
    let vein_drop = rng.random_range(55.0..75.0);
    let bg_level = rng.random_range(15.0..35.0);
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let illum = gx * (xf / s - 0.5) + gy * (yf / s - 0.5);
            let idx = y * size + x;
            let mut v = if arm_mask.data[idx] != 0 {
                let edge = (across(xf, yf).abs() / hw).powi(2);
                let mut v = arm_level - 25.0 * edge + illum;
                let d = ((xf - fc.0).powi(2) + (yf - fc.1).powi(2)).sqrt();
                v -= 18.0 * (-(d * d) / (2.0 * (1.3 * r).powi(2))).exp();
                if vein_mask.data[idx] != 0 {
                    v -= vein_drop;
                }
                v
            } else {
                bg_level + 0.3 * illum
            };
            let _ = along(xf, yf);
            v += noise.sample(rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Sample {
        id,
        image: GrayImage {
            width: size,
            height: size,
            pixels,
        },
        vein_mask,
        arm_mask,
        fossa_mask,
        bbox,
        centroid,
        angle,
    }
}

/// `count` synthetic samples of `size`×`size`, deterministic in `seed`.
pub fn synth_generate(count: usize, size: usize, seed: u64) -> Result<Vec<Sample>, DataError> {
    synth_generate_with(count, size, seed, &SynthSpec::default())
}

pub fn synth_generate_with(count: usize, size: usize, seed: u64, spec: &SynthSpec) -> Result<Vec<Sample>, DataError> {
    if size < 32 {
        return Err(DataError::Invalid {
            id: "<synth>".into(),
            reason: format!("size must be >= 32, got {size}"),
        });
    }
    Ok((0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            synth_sample(format!("synth_{i:05}"), size, spec, &mut rng)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::angle::arm_angle;
    use crate::metrics::axial_diff_deg;

    #[test]
    fn split_sizes_follow_floor_rule() {
        assert_eq!(split_sizes(2016), (1411, 403, 202));
        assert_eq!(split_sizes(10), (7, 2, 1));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let ids: Vec<String> = (0..37).map(|i| format!("s{i}")).collect();
        let a = split_ids(&ids, 5).unwrap();
        assert_eq!(a, split_ids(&ids, 5).unwrap());
        let mut all: Vec<String> = a.train.iter().chain(&a.val).chain(&a.test).cloned().collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        assert_eq!(all, want);
        assert!(matches!(split_ids(&ids[..9], 0), Err(DataError::TooFewSamples(9))));
    }

    #[test]
    fn synthetic_samples_satisfy_invariants() {
        let ds = synth_generate(12, 64, 3).unwrap();
        for s in &ds {
            s.validate().unwrap();
            assert!(s.vein_mask.is_subset_of(&s.arm_mask));
            let (bx, by, bw, bh) = s.bbox;
            // bbox inside arm band
            for y in by..by + bh {
                for x in bx..bx + bw {
                    if s.fossa_mask.get(x, y) {
                        assert!(s.arm_mask.get(x, y));
                    }
                }
            }
            assert!(s.vein_mask.area() > 0);
        }
    }

    #[test]
    fn synthetic_angle_matches_labeler() {
        for s in synth_generate(16, 64, 11).unwrap() {
            let got = arm_angle(&s.arm_mask).unwrap();
            assert!(axial_diff_deg(got, s.angle) <= 3.0, "{}: {} vs {}", s.id, got, s.angle);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_generate(4, 48, 9).unwrap();
        let b = synth_generate(4, 48, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_generate(4, 48, 10).unwrap());
        assert!(synth_generate(1, 16, 0).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(3, 40, 1).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn load_reports_missing_mask_and_bad_centroid() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = synth_generate(3, 40, 2).unwrap();
        ds[2].centroid = (0.0, 0.0);
        ds[2].bbox = (20, 20, 5, 5);
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(png_path(dir.path(), VEIN_DIR, &ds[1].id)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let DataError::Rows(rows) = &err else { panic!("{err}") };
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].row, 2);
        assert!(rows[0].message.contains("masks_vein"), "{}", rows[0].message);
        assert_eq!(rows[0].id, ds[1].id);
        assert_eq!(rows[1].id, ds[2].id);
        assert!(rows[1].message.contains("centroid"));
    }

    #[test]
    fn missing_root_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(&dir.path().join("nope")),
            Err(DataError::MissingRoot(..))
        ));
    }
}
