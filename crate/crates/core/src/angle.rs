//! Ground-truth arm angle from an arm mask: erode the arm to a line-like
//! shape, vote in a (θ, ρ) Hough accumulator, and average the strongest
//! cells.
//!
//! Angles are reported in `[0, 180)` degrees, counterclockwise from the
//! positive x axis as the image is displayed (y grows downwards), so a
//! horizontal arm is 0° and a vertical arm 90°.

use thiserror::Error;

use crate::imaging::Mask;

/// Erosion never shrinks the arm below this many pixels.
pub const MIN_LINE_AREA: usize = 50;
/// ... nor below this fraction of the original area.
pub const MIN_LINE_FRACTION: f64 = 0.02;
/// Accumulator cells with at least this fraction of the peak vote are
/// averaged.
pub const PEAK_FRACTION: f64 = 0.5;
pub const THETA_BINS: usize = 180;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AngleError {
    #[error("hough transform needs at least 2 foreground pixels, got {0}")]
    TooFewPixels(usize),
    #[error("no accumulator peak above threshold for mask {0}")]
    NoPeak(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eroded {
    pub mask: Mask,
    pub steps: usize,
    /// Set when the input was too small to erode and was returned as is.
    pub too_small: bool,
}

/// One binary erosion with a 3×3 cross; pixels outside the image count as
/// background.
pub fn erode_cross(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    Mask::from_fn(w, h, |x, y| {
        mask.get(x, y)
            && x > 0
            && y > 0
            && x + 1 < w
            && y + 1 < h
            && mask.get(x - 1, y)
            && mask.get(x + 1, y)
            && mask.get(x, y - 1)
            && mask.get(x, y + 1)
    })
}

/// Repeatedly erodes, stopping before the step that would drop the area
/// below `max(50 px, 2% of the original area)`.
pub fn erode_to_line(arm: &Mask) -> Eroded {
    let original = arm.area();
    if original < MIN_LINE_AREA {
        return Eroded {
            mask: arm.clone(),
            steps: 0,
            too_small: true,
        };
    }
    let floor = MIN_LINE_AREA.max((MIN_LINE_FRACTION * original as f64).ceil() as usize);
    let mut cur = arm.clone();
    let mut area = original;
    let mut steps = 0;
    loop {
        let next = erode_cross(&cur);
        let next_area = next.area();
        if next_area < floor || next_area == area {
            break;
        }
        cur = next;
        area = next_area;
        steps += 1;
    }
    Eroded {
        mask: cur,
        steps,
        too_small: false,
    }
}

/// Vote counts over θ ∈ {0°, 1°, …, 179°} and integer ρ ∈ [−D, D], where D
/// is the rounded-up image diagonal and ρ = x·cosθ + y·sinθ.
#[derive(Debug, Clone, PartialEq)]
pub struct HoughAccumulator {
    pub max_rho: usize,
    pub counts: Vec<u32>,
}

impl HoughAccumulator {
    pub fn rho_bins(&self) -> usize {
        2 * self.max_rho + 1
    }

    pub fn get(&self, theta_deg: usize, rho: i64) -> u32 {
        self.counts[theta_deg * self.rho_bins() + (rho + self.max_rho as i64) as usize]
    }

    pub fn total_votes(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn max_votes(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// `(θ°, ρ, votes)` of the first maximal cell in scan order.
    pub fn peak(&self) -> (usize, i64, u32) {
        let rb = self.rho_bins();
        let (idx, &v) = self
            .counts
            .iter()
            .enumerate()
            .fold((0, &0u32), |best, cur| if cur.1 > best.1 { cur } else { best });
        (idx / rb, (idx % rb) as i64 - self.max_rho as i64, v)
    }
}

pub fn hough_lines(mask: &Mask) -> Result<HoughAccumulator, AngleError> {
    let area = mask.area();
    if area < 2 {
        return Err(AngleError::TooFewPixels(area));
    }
    let max_rho = ((mask.width * mask.width + mask.height * mask.height) as f64).sqrt().ceil() as usize;
    let rb = 2 * max_rho + 1;
    let trig: Vec<(f64, f64)> = (0..THETA_BINS)
        .map(|t| (t as f64).to_radians().sin_cos())
        .collect();
    let mut counts = vec![0u32; THETA_BINS * rb];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) {
                continue;
            }
            for (t, &(s, c)) in trig.iter().enumerate() {
                let rho = (x as f64 * c + y as f64 * s).round() as i64;
                counts[t * rb + (rho + max_rho as i64) as usize] += 1;
            }
        }
    }
    Ok(HoughAccumulator { max_rho, counts })
}

/// Full labeling result including debug quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleEstimate {
    pub angle_deg: f64,
    /// Axial mean of the selected line normals.
    pub theta_mean_deg: f64,
    /// Plain mean ρ of the selected cells; informational only.
    pub rho_mean: f64,
    pub cells: usize,
    pub erosion_steps: usize,
    pub too_small: bool,
}

/// Averages the line-normal angles of all cells holding at least half the
/// peak vote as axial data (doubled-angle unit vectors), then converts the
/// normal to the displayed counterclockwise arm direction.
pub fn estimate_from_accumulator(acc: &HoughAccumulator, label: &str) -> Result<(f64, f64, f64, usize), AngleError> {
    let max = acc.max_votes();
    if max == 0 {
        return Err(AngleError::NoPeak(label.to_string()));
    }
    let thresh = PEAK_FRACTION * max as f64;
    let rb = acc.rho_bins();
    let (mut sc, mut ss, mut rho_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (idx, &c) in acc.counts.iter().enumerate() {
        if c as f64 >= thresh {
            let theta = (idx / rb) as f64;
            let (s, co) = (2.0 * theta).to_radians().sin_cos();
            sc += co;
            ss += s;
            rho_sum += (idx % rb) as f64 - acc.max_rho as f64;
            n += 1;
        }
    }
    if n == 0 || (sc.abs() < 1e-12 && ss.abs() < 1e-12) {
        return Err(AngleError::NoPeak(label.to_string()));
    }
    let theta_mean = (ss.atan2(sc).to_degrees() / 2.0).rem_euclid(180.0);
    // normal (cosθ, sinθ) in y-down coordinates ⟂ direction (cosα, −sinα)
    let angle = normalize_deg(90.0 - theta_mean);
    Ok((angle, theta_mean, rho_sum / n as f64, n))
}

/// Maps any angle into `[0, 180)`; values that round to 180 map to 0.
pub fn normalize_deg(a: f64) -> f64 {
    let r = a.rem_euclid(180.0);
    if r >= 180.0 - 1e-9 {
        0.0
    } else {
        r
    }
}

pub fn arm_angle_detailed(arm: &Mask, label: &str) -> Result<AngleEstimate, AngleError> {
    let eroded = erode_to_line(arm);
    let acc = hough_lines(&eroded.mask)?;
    let (angle_deg, theta_mean_deg, rho_mean, cells) = estimate_from_accumulator(&acc, label)?;
    Ok(AngleEstimate {
        angle_deg,
        theta_mean_deg,
        rho_mean,
        cells,
        erosion_steps: eroded.steps,
        too_small: eroded.too_small,
    })
}

/// Arm orientation in `[0, 180)` degrees.
pub fn arm_angle(arm: &Mask) -> Result<f64, AngleError> {
    arm_angle_detailed(arm, "<mask>").map(|e| e.angle_deg)
}

/// Filled bar of the given length and thickness at `angle_deg`
/// (counterclockwise as displayed) centred at `(cx, cy)`.
pub fn synthetic_bar(size: usize, cx: f64, cy: f64, length: f64, thickness: f64, angle_deg: f64) -> Mask {
    let (s, c) = angle_deg.to_radians().sin_cos();
    Mask::from_fn(size, size, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let along = dx * c - dy * s;
        let across = dx * s + dy * c;
        along.abs() <= length / 2.0 + 1e-9 && across.abs() <= thickness / 2.0 + 1e-9
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::axial_diff_deg;

    /// Principal axis of the foreground via second moments, in the same
    /// displayed-counterclockwise convention.
    fn principal_axis(m: &Mask) -> f64 {
        let (cx, cy) = m.centroid().unwrap();
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(x, y) {
                    let dx = x as f64 - cx;
                    let dy = -(y as f64 - cy);
                    sxx += dx * dx;
                    syy += dy * dy;
                    sxy += dx * dy;
                }
            }
        }
        normalize_deg((0.5 * (2.0 * sxy).atan2(sxx - syy)).to_degrees())
    }

    #[test]
    fn erosion_area_strictly_decreases_until_stop() {
        let bar = Mask::from_fn(60, 30, |x, y| (10..50).contains(&x) && (11..19).contains(&y));
        assert_eq!(bar.area(), 320);
        let mut cur = bar.clone();
        let floor = 50usize.max((0.02f64 * 320.0).ceil() as usize);
        let mut last = cur.area();
        loop {
            let next = erode_cross(&cur);
            if next.area() < floor {
                break;
            }
            assert!(next.area() < last);
            last = next.area();
            cur = next;
        }
        let e = erode_to_line(&bar);
        assert_eq!(e.mask, cur);
        assert!(e.mask.area() < bar.area());
        assert!(e.mask.area() >= floor);
        assert!(e.mask.is_subset_of(&bar));
    }

    #[test]
    fn single_pixel_line_is_unchanged() {
        let line = Mask::from_fn(100, 10, |x, y| y == 5 && (10..90).contains(&x));
        let e = erode_to_line(&line);
        assert_eq!(e.mask, line);
        assert_eq!(e.steps, 0);
        assert!(!e.too_small);
    }

    #[test]
    fn tiny_mask_is_flagged() {
        let m = Mask::from_fn(10, 10, |x, y| x < 3 && y < 3);
        let e = erode_to_line(&m);
        assert!(e.too_small);
        assert_eq!(e.mask, m);
    }

    #[test]
    fn eroded_bar_keeps_principal_axis() {
        let bar = synthetic_bar(96, 48.0, 48.0, 60.0, 20.0, 30.0);
        let e = erode_to_line(&bar);
        let axis = principal_axis(&e.mask);
        assert!(axial_diff_deg(axis, 30.0) <= 3.0, "axis {axis}");
    }

    #[test]
    fn two_points_share_their_line_cell() {
        let m = Mask::from_fn(20, 20, |x, y| (x, y) == (0, 0) || (x, y) == (10, 10));
        let acc = hough_lines(&m).unwrap();
        assert_eq!(acc.get(135, 0), 2);
        assert_eq!(acc.max_votes(), 2);
    }

    #[test]
    fn horizontal_row_peaks_at_theta_90() {
        let k = 7;
        let m = Mask::from_fn(32, 32, |x, y| y == k && (2..30).contains(&x));
        let acc = hough_lines(&m).unwrap();
        let (t, rho, v) = acc.peak();
        assert_eq!((t, rho, v), (90, k as i64, 28));
        assert_eq!(acc.total_votes(), 28 * 180);
        assert_eq!(acc.counts.len(), 180 * acc.rho_bins());
    }

    #[test]
    fn hough_rejects_single_pixel() {
        let m = Mask::from_fn(5, 5, |x, y| x == 2 && y == 2);
        assert_eq!(hough_lines(&m), Err(AngleError::TooFewPixels(1)));
    }

    #[test]
    fn anchors_horizontal_and_vertical() {
        let h = synthetic_bar(64, 32.0, 32.0, 50.0, 12.0, 0.0);
        assert!(axial_diff_deg(arm_angle(&h).unwrap(), 0.0) < 1e-9 || arm_angle(&h).unwrap() == 0.0);
        let v = synthetic_bar(64, 32.0, 32.0, 50.0, 12.0, 90.0);
        assert!((arm_angle(&v).unwrap() - 90.0).abs() <= 1.0);
    }

    #[test]
    fn oblique_bars_within_three_degrees() {
        for a in [30.0, 45.0, 60.0, 120.0, 150.0] {
            let bar = synthetic_bar(64, 32.0, 32.0, 56.0, 12.0, a);
            let got = arm_angle(&bar).unwrap();
            assert!(axial_diff_deg(got, a) <= 3.0, "{a}: {got}");
            assert!((0.0..180.0).contains(&got));
        }
    }

    #[test]
    fn seam_angles_average_axially() {
        // near-horizontal bars straddle the 0/180 seam in θ-space
        for a in [1.0, 179.0, 2.5, 177.5] {
            let got = arm_angle(&synthetic_bar(80, 40.0, 40.0, 70.0, 10.0, a)).unwrap();
            assert!(axial_diff_deg(got, a) <= 3.0, "{a}: {got}");
        }
    }
}
