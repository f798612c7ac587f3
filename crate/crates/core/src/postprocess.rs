//! Decoding model outputs into a fossa location, restricting veins to the
//! fossa region, and rendering overlays.

use serde::{Deserialize, Serialize};

use crate::imaging::{GrayImage, Mask, RgbImage};

pub const DEFAULT_ROI_FRAC_W: f64 = 0.40;
pub const DEFAULT_ROI_FRAC_H: f64 = 0.25;

pub const VEIN_TINT: [u8; 3] = [255, 64, 32];
pub const ROI_COLOR: [u8; 3] = [40, 220, 80];
pub const CROSS_COLOR: [u8; 3] = [40, 120, 255];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FossaPrediction {
    pub cx: f64,
    pub cy: f64,
    pub angle: f64,
    pub roi_width: f64,
    pub roi_height: f64,
}

impl FossaPrediction {
    /// Rectangle of `frac_w·S × frac_h·S`. A fraction of 1 or more leaves
    /// that axis unbounded, so `(1, 1)` keeps the whole frame.
    pub fn with_roi_fraction(mut self, image_size: usize, frac_w: f64, frac_h: f64) -> Self {
        let extent = |f: f64| if f >= 1.0 { f64::INFINITY } else { f * image_size as f64 };
        self.roi_width = extent(frac_w);
        self.roi_height = extent(frac_h);
        self
    }

    /// Whether `(x, y)` lies in the rectangle centred on the fossa, its
    /// width axis along the arm.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.to_radians().sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        // arm direction in y-down coordinates is (c, −s)
        let u = dx * c - dy * s;
        let v = dx * s + dy * c;
        u.abs() <= self.roi_width / 2.0 && v.abs() <= self.roi_height / 2.0
    }

    fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.angle.to_radians().sin_cos();
        let (hw, hh) = (self.roi_width / 2.0, self.roi_height / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(u, v)| (self.cx + u * c + v * s, self.cy - u * s + v * c))
    }
}

/// `cx = raw₀·S`, `cy = raw₁·S`, `angle = raw₂·180` with the ROI at the
/// default fractions. Coordinates are clamped into the frame.
pub fn decode_fossa(raw: [f64; 3], image_size: usize) -> FossaPrediction {
    let s = image_size as f64;
    let clamp = |v: f64| v.clamp(0.0, (s - 1e-9).max(0.0));
    let mut angle = raw[2] * 180.0;
    if !(0.0..180.0).contains(&angle) {
        angle = crate::angle::normalize_deg(angle);
    }
    FossaPrediction {
        cx: clamp(raw[0] * s),
        cy: clamp(raw[1] * s),
        angle,
        roi_width: 0.0,
        roi_height: 0.0,
    }
    .with_roi_fraction(image_size, DEFAULT_ROI_FRAC_W, DEFAULT_ROI_FRAC_H)
}

/// Inverse of [`decode_fossa`].
pub fn encode_fossa(cx: f64, cy: f64, angle: f64, image_size: usize) -> [f64; 3] {
    let s = image_size as f64;
    [cx / s, cy / s, angle / 180.0]
}

/// Vein pixels inside the fossa rectangle; everything else cleared.
pub fn roi_filter(vein_mask: &Mask, fossa: &FossaPrediction) -> Mask {
    Mask::from_fn(vein_mask.width, vein_mask.height, |x, y| {
        vein_mask.get(x, y) && fossa.contains(x as f64, y as f64)
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.pixels[y as usize * img.width + x as usize] = color;
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, color);
    }
}

/// Grayscale promoted to RGB with vein pixels tinted, the ROI outline and a
/// centroid crosshair drawn over it.
pub fn render_overlay(image: &GrayImage, filtered: &Mask, fossa: &FossaPrediction) -> RgbImage {
    let mut out = RgbImage::from_gray(image);
    for (px, &m) in out.pixels.iter_mut().zip(&filtered.data) {
        if m != 0 {
            let g = px[0] as u16;
            *px = VEIN_TINT.map(|t| ((t as u16 + g) / 2) as u8);
        }
    }
    let c = fossa.corners();
    if c.iter().all(|p| p.0.is_finite() && p.1.is_finite()) {
        for i in 0..4 {
            line(&mut out, c[i], c[(i + 1) % 4], ROI_COLOR);
        }
    }
    let arm = (image.width.min(image.height) as f64 / 32.0).max(2.0);
    line(&mut out, (fossa.cx - arm, fossa.cy), (fossa.cx + arm, fossa.cy), CROSS_COLOR);
    line(&mut out, (fossa.cx, fossa.cy - arm), (fossa.cx, fossa.cy + arm), CROSS_COLOR);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(cx: f64, cy: f64, angle: f64, w: f64, h: f64) -> FossaPrediction {
        FossaPrediction {
            cx,
            cy,
            angle,
            roi_width: w,
            roi_height: h,
        }
    }

    #[test]
    fn midpoint_decode() {
        let p = decode_fossa([0.5, 0.5, 0.5], 512);
        assert_eq!((p.cx, p.cy, p.angle), (256.0, 256.0, 90.0));
        assert!((p.roi_width - 204.8).abs() < 1e-9 && (p.roi_height - 128.0).abs() < 1e-9);
        let p = decode_fossa([1e-4, 2e-4, 0.0], 512);
        assert!(p.cx < 0.1 && p.cy < 0.2);
    }

    #[test]
    fn full_roi_is_passthrough_and_empty_stays_empty() {
        let m = Mask::from_fn(32, 32, |x, y| (x + y) % 3 == 0);
        let p = pred(16.0, 16.0, 37.0, 200.0, 200.0);
        assert_eq!(roi_filter(&m, &p), m);
        assert_eq!(roi_filter(&Mask::empty(32, 32), &p).area(), 0);
        let corner = pred(1.0, 30.0, 37.0, 0.0, 0.0).with_roi_fraction(32, 1.0, 1.0);
        assert_eq!(roi_filter(&m, &corner), m);
        let img = GrayImage::filled(32, 32, 10);
        let out = render_overlay(&img, &m, &corner);
        assert!(out.pixels.iter().all(|px| *px != ROI_COLOR));
    }

    #[test]
    fn axis_aligned_point_in_rectangle() {
        let m = Mask::from_fn(64, 64, |_, _| true);
        let p = pred(20.0, 30.0, 0.0, 16.0, 8.0);
        let out = roi_filter(&m, &p);
        assert!(out.get(20, 30));
        assert!(!out.get(20 + 8 + 5, 30));
        assert!(out.get(28, 34));
        assert!(!out.get(20, 35));
    }

    #[test]
    fn overlay_contract() {
        let img = GrayImage::filled(40, 30, 100);
        let m = Mask::from_fn(40, 30, |x, _| x == 5);
        let p = pred(20.0, 15.0, 10.0, 12.0, 6.0);
        let out = render_overlay(&img, &m, &p);
        assert_eq!((out.width, out.height), (40, 30));
        let tinted = VEIN_TINT.map(|t| ((t as u16 + 100) / 2) as u8);
        for (i, px) in out.pixels.iter().enumerate() {
            if *px == tinted {
                assert_eq!(m.data[i], 1);
            }
        }
        let empty = render_overlay(&img, &Mask::empty(40, 30), &p);
        assert!(empty.pixels.iter().all(|px| *px == [100; 3] || *px == ROI_COLOR || *px == CROSS_COLOR));
    }
}
