//! Paired augmentation of images and their masks.
//!
//! Geometric steps (flip, rotate, perspective) are composed into a single
//! homography and applied once: bilinear for the image, nearest for every
//! mask. Labels are then re-derived from the warped masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::geom::{self, Homography};
use super::ImagingError;
use crate::angle::{self, MIN_LINE_AREA};
use crate::data::{derive_seed, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugSpec {
    pub flip_prob: f64,
    pub rotate_prob: f64,
    /// Rotation range in degrees, counterclockwise as displayed.
    pub rotate_range: (f64, f64),
    pub perspective_prob: f64,
    /// Maximum corner displacement as a fraction of the image size.
    pub perspective_jitter: f64,
    pub blur_prob: f64,
    pub gaussian_sigma: (f64, f64),
    pub average_kernels: Vec<usize>,
    pub gamma_prob: f64,
    pub gamma_range: (f64, f64),
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for AugSpec {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate_prob: 0.5,
            rotate_range: (-180.0, 180.0),
            perspective_prob: 0.3,
            perspective_jitter: 0.08,
            blur_prob: 0.3,
            gaussian_sigma: (0.5, 1.5),
            average_kernels: vec![3, 5],
            gamma_prob: 0.3,
            gamma_range: (0.7, 1.4),
            seed: 0,
            max_retries: 10,
        }
    }
}

impl AugSpec {
    /// Every technique disabled.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            rotate_prob: 0.0,
            perspective_prob: 0.0,
            blur_prob: 0.0,
            gamma_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("rotate_prob", self.rotate_prob),
            ("perspective_prob", self.perspective_prob),
            ("blur_prob", self.blur_prob),
            ("gamma_prob", self.gamma_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(ImagingError::InvalidParameter(format!("{name} = {p} outside [0,1]")));
            }
        }
        let ranges = [
            ("rotate_range", self.rotate_range),
            ("gaussian_sigma", self.gaussian_sigma),
            ("gamma_range", self.gamma_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(ImagingError::InvalidParameter(format!("{name} = ({lo}, {hi}) is not a range")));
            }
        }
        if self.gaussian_sigma.0 < 0.0 || self.gamma_range.0 <= 0.0 {
            return Err(ImagingError::InvalidParameter("blur sigma and gamma must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.perspective_jitter) {
            return Err(ImagingError::InvalidParameter(format!(
                "perspective_jitter = {} outside [0,0.5)",
                self.perspective_jitter
            )));
        }
        if self.average_kernels.is_empty() || self.average_kernels.contains(&0) {
            return Err(ImagingError::InvalidParameter("average_kernels must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// `a ∘ b` for output→source maps: the result applies `a` first.
fn compose(a: &Homography, b: &Homography) -> Homography {
    // source = b(a(x)); as matrices B·A
    let (a, b) = (&a.0, &b.0);
    let mut m = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            m[r * 3 + c] = (0..3).map(|k| b[r * 3 + k] * a[k * 3 + c]).sum();
        }
    }
    Homography(m)
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws the geometric part of one augmentation as an output→source map.
fn draw_geometry(spec: &AugSpec, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Homography {
    // Forward order is flip → rotate → perspective, so the inverse map
    // undoes the perspective first.
    let flip = rng.random_bool(spec.flip_prob);
    let rot = rng.random_bool(spec.rotate_prob).then(|| sample_range(rng, spec.rotate_range));
    let persp = rng.random_bool(spec.perspective_prob).then(|| {
        let j = spec.perspective_jitter * w.max(h) as f64;
        let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
        let corners = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
        let mut moved = corners;
        for c in moved.iter_mut() {
            c.0 += rng.random_range(-j..=j);
            c.1 += rng.random_range(-j..=j);
        }
        Homography::from_points(corners, moved).unwrap_or_else(Homography::identity)
    });
    let mut m = persp.unwrap_or_else(Homography::identity);
    if let Some(deg) = rot {
        m = compose(&m, &Homography::rotation(w, h, deg));
    }
    if flip {
        m = compose(&m, &Homography::hflip(w));
    }
    m
}

/// Warps image and masks through `h` and re-derives the labels. Returns
/// `None` when the arm or fossa no longer supports a label.
pub fn apply_geometry(sample: &Sample, h: &Homography) -> Option<Sample> {
    let image = geom::warp_image(&sample.image, h);
    let arm_mask = geom::warp_mask(&sample.arm_mask, h);
    let vein_mask = geom::warp_mask(&sample.vein_mask, h).and(&arm_mask);
    let fossa_mask = geom::warp_mask(&sample.fossa_mask, h);
    if arm_mask.area() < MIN_LINE_AREA {
        return None;
    }
    let centroid = fossa_mask.centroid()?;
    let bbox = fossa_mask.bbox()?;
    let angle = angle::arm_angle(&arm_mask).ok()?;
    Some(Sample {
        id: sample.id.clone(),
        image,
        vein_mask,
        arm_mask,
        fossa_mask,
        bbox,
        centroid,
        angle: crate::data::round_angle(angle),
    })
}

fn photometric(sample: &mut Sample, spec: &AugSpec, rng: &mut ChaCha8Rng) {
    if rng.random_bool(spec.blur_prob) {
        if rng.random_bool(0.5) {
            let sigma = sample_range(rng, spec.gaussian_sigma);
            sample.image = geom::gaussian_blur(&sample.image, sigma);
        } else {
            let k = spec.average_kernels[rng.random_range(0..spec.average_kernels.len())];
            sample.image = geom::average_blur(&sample.image, k);
        }
    }
    if rng.random_bool(spec.gamma_prob) {
        let g = sample_range(rng, spec.gamma_range);
        sample.image = geom::gamma_contrast(&sample.image, g);
    }
}

/// One augmented copy of `sample` drawn from `rng`. Geometric draws that
/// push the arm or fossa out of frame are redrawn up to `max_retries`
/// times; after that the geometric step is skipped.
pub fn augment_with(sample: &Sample, spec: &AugSpec, rng: &mut ChaCha8Rng) -> Sample {
    let (w, h) = (sample.image.width, sample.image.height);
    let geometric = spec.flip_prob > 0.0 || spec.rotate_prob > 0.0 || spec.perspective_prob > 0.0;
    let mut out = None;
    if geometric {
        for _ in 0..=spec.max_retries {
            let m = draw_geometry(spec, w, h, rng);
            if m == Homography::identity() {
                out = Some(sample.clone());
                break;
            }
            if let Some(s) = apply_geometry(sample, &m) {
                out = Some(s);
                break;
            }
            log::debug!("augmentation of {} rejected, redrawing", sample.id);
        }
    }
    let mut out = out.unwrap_or_else(|| sample.clone());
    photometric(&mut out, spec, rng);
    out
}

/// Augments `sample` with a generator seeded from `(spec.seed, index)`.
pub fn augment(sample: &Sample, spec: &AugSpec, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index));
    augment_with(sample, spec, &mut rng)
}

/// `(base index, copy number)` for each augmented slot; copy numbers start
/// at 1.
pub fn augmentation_plan(base: usize, target: usize) -> Vec<(usize, usize)> {
    (0..target.saturating_sub(base)).map(|k| (k % base, k / base + 1)).collect()
}

/// Every base sample in order followed by round-robin augmented copies
/// named `{id}_aug{k}`, for exactly `target_count` samples.
pub fn build_augmented_set(base: &[Sample], target_count: usize, spec: &AugSpec) -> Result<Vec<Sample>, ImagingError> {
    if base.is_empty() {
        return Err(ImagingError::InvalidParameter("augmentation needs a non-empty base set".into()));
    }
    if target_count < base.len() {
        return Err(ImagingError::InvalidParameter(format!(
            "target {target_count} is smaller than the base set ({})",
            base.len()
        )));
    }
    spec.validate()?;
    let extra: Vec<Sample> = augmentation_plan(base.len(), target_count)
        .into_par_iter()
        .enumerate()
        .map(|(k, (i, copy))| {
            let mut s = augment(&base[i], spec, k as u64);
            s.id = format!("{}_aug{copy}", base[i].id);
            s
        })
        .collect();
    let mut out = base.to_vec();
    out.extend(extra);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::imaging::{GrayImage, Mask};
    use crate::metrics::axial_diff_deg;

    fn bar_sample(angle: f64, size: usize) -> Sample {
        let c = (size as f64 - 1.0) / 2.0;
        let arm = angle::synthetic_bar(size, c, c, size as f64 * 2.0, size as f64 * 0.3, angle);
        let fossa = Mask::from_fn(size, size, |x, y| {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            dx * dx + dy * dy <= 16.0
        });
        let image = GrayImage::new(size, size, arm.data.iter().map(|&v| 40 + v * 150).collect()).unwrap();
        Sample {
            id: "bar".into(),
            image,
            vein_mask: Mask::empty(size, size),
            fossa_mask: fossa.clone(),
            bbox: fossa.bbox().unwrap(),
            centroid: fossa.centroid().unwrap(),
            arm_mask: arm,
            angle,
        }
    }

    #[test]
    fn identity_spec_leaves_sample_unchanged() {
        let s = &synth_generate(1, 48, 4).unwrap()[0];
        assert_eq!(&augment(s, &AugSpec::identity(), 0), s);
    }

    #[test]
    fn flip_reflects_angle() {
        let s = bar_sample(30.0, 64);
        let out = apply_geometry(&s, &Homography::hflip(64)).unwrap();
        assert!(axial_diff_deg(out.angle, 150.0) <= 3.0, "{}", out.angle);
    }

    #[test]
    fn rotation_adds_angle() {
        let s = bar_sample(0.0, 64);
        let out = apply_geometry(&s, &Homography::rotation(64, 64, 90.0)).unwrap();
        assert!(axial_diff_deg(out.angle, 90.0) <= 3.0, "{}", out.angle);
        let spec = AugSpec {
            rotate_prob: 1.0,
            rotate_range: (90.0, 90.0),
            ..AugSpec::identity()
        };
        let out = augment(&s, &spec, 3);
        assert!(axial_diff_deg(out.angle, 90.0) <= 3.0, "{}", out.angle);
    }

    #[test]
    fn composition_applies_first_map_first() {
        let f = Homography::hflip(10);
        let t = Homography([1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = compose(&t, &f);
        let (x, y) = m.apply(1.0, 5.0);
        assert_eq!((x, y), (6.0, 5.0));
    }

    #[test]
    fn augmented_samples_stay_consistent() {
        let base = synth_generate(4, 64, 8).unwrap();
        let spec = AugSpec {
            flip_prob: 0.5,
            rotate_prob: 1.0,
            perspective_prob: 0.5,
            blur_prob: 0.5,
            gamma_prob: 0.5,
            seed: 13,
            ..AugSpec::default()
        };
        let set = build_augmented_set(&base, 12, &spec).unwrap();
        assert_eq!(set.len(), 12);
        assert_eq!(&set[..4], &base[..]);
        assert_eq!(set[4].id, format!("{}_aug1", base[0].id));
        assert_eq!(set[11].id, format!("{}_aug2", base[3].id));
        for s in &set {
            s.validate().unwrap();
            for m in [&s.vein_mask, &s.arm_mask, &s.fossa_mask] {
                assert!(m.data.iter().all(|&v| v <= 1));
            }
        }
        assert_eq!(set, build_augmented_set(&base, 12, &spec).unwrap());
    }

    #[test]
    fn plan_counts() {
        let plan = augmentation_plan(2016, 8000);
        assert_eq!(2016 + plan.len(), 8000);
        assert_eq!(plan[2016], (0, 2));
        assert!(augmentation_plan(5, 5).is_empty());
    }

    #[test]
    fn passthrough_and_errors() {
        let base = synth_generate(3, 40, 1).unwrap();
        assert_eq!(build_augmented_set(&base, 3, &AugSpec::default()).unwrap(), base);
        assert!(build_augmented_set(&base, 2, &AugSpec::default()).is_err());
        assert!(build_augmented_set(&[], 2, &AugSpec::default()).is_err());
        let bad = AugSpec {
            flip_prob: 1.5,
            ..AugSpec::default()
        };
        assert!(build_augmented_set(&base, 4, &bad).is_err());
    }
}
