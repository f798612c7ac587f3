//! Resampling, geometric warps and photometric filters.

use super::{GrayImage, Mask};

/// Square bilinear resize with pixel-centre alignment.
pub fn resize(img: &GrayImage, target: usize) -> GrayImage {
    if img.width == target && img.height == target {
        return img.clone();
    }
    let sx = img.width as f64 / target as f64;
    let sy = img.height as f64 / target as f64;
    let mut out = Vec::with_capacity(target * target);
    for y in 0..target {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        for x in 0..target {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            out.push(sample_bilinear(img, fx, fy).round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage {
        width: target,
        height: target,
        pixels: out,
    }
}

/// Square nearest-neighbour resize; keeps masks binary.
pub fn resize_mask(mask: &Mask, target: usize) -> Mask {
    if mask.width == target && mask.height == target {
        return mask.clone();
    }
    let sx = mask.width as f64 / target as f64;
    let sy = mask.height as f64 / target as f64;
    Mask::from_fn(target, target, |x, y| {
        let ix = (((x as f64 + 0.5) * sx) as usize).min(mask.width - 1);
        let iy = (((y as f64 + 0.5) * sy) as usize).min(mask.height - 1);
        mask.get(ix, iy)
    })
}

fn sample_bilinear(img: &GrayImage, fx: f64, fy: f64) -> f64 {
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let (wx, wy) = (fx - x0 as f64, fy - y0 as f64);
    let p = |x, y| img.get(x, y) as f64;
    let top = p(x0, y0) + (p(x1, y0) - p(x0, y0)) * wx;
    let bot = p(x0, y1) + (p(x1, y1) - p(x0, y1)) * wx;
    top + (bot - top) * wy
}

/// Projective map from output pixel coordinates to source coordinates,
/// row-major 3×3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub fn identity() -> Self {
        Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + h[8];
        ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
    }

    /// Inverse map of a counterclockwise (as displayed, y down) rotation by
    /// `deg` about the image centre.
    pub fn rotation(width: usize, height: usize, deg: f64) -> Self {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (s, c) = deg.to_radians().sin_cos();
        // forward: x' = cx + c·dx + s·dy, y' = cy − s·dx + c·dy
        // inverse: dx = c·dx' − s·dy', dy = s·dx' + c·dy'
        Self([
            c,
            -s,
            cx - c * cx + s * cy,
            s,
            c,
            cy - s * cx - c * cy,
            0.0,
            0.0,
            1.0,
        ])
    }

    pub fn hflip(width: usize) -> Self {
        Self([-1.0, 0.0, width as f64 - 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    /// Homography taking each `from[i]` to `to[i]`; `None` when degenerate.
    pub fn from_points(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> Option<Self> {
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let (x, y) = from[i];
            let (u, v) = to[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        for col in 0..8 {
            let piv = (col..8).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
            if a[piv][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, piv);
            for r in 0..8 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..9 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let mut h = [0.0; 9];
        for i in 0..8 {
            h[i] = a[i][8] / a[i][i];
        }
        h[8] = 1.0;
        Some(Self(h))
    }
}

/// Resamples `img` through `h` (bilinear); samples outside become 0.
pub fn warp_image(img: &GrayImage, h: &Homography) -> GrayImage {
    let mut out = Vec::with_capacity(img.pixels.len());
    let (wmax, hmax) = ((img.width - 1) as f64, (img.height - 1) as f64);
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = h.apply(x as f64, y as f64);
            let v = if sx >= -0.5 && sy >= -0.5 && sx <= wmax + 0.5 && sy <= hmax + 0.5 {
                sample_bilinear(img, sx.clamp(0.0, wmax), sy.clamp(0.0, hmax))
            } else {
                0.0
            };
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: out,
    }
}

/// Resamples `mask` through `h` (nearest); samples outside become 0.
pub fn warp_mask(mask: &Mask, h: &Homography) -> Mask {
    Mask::from_fn(mask.width, mask.height, |x, y| {
        let (sx, sy) = h.apply(x as f64, y as f64);
        let (ix, iy) = (sx.round(), sy.round());
        ix >= 0.0
            && iy >= 0.0
            && (ix as usize) < mask.width
            && (iy as usize) < mask.height
            && mask.get(ix as usize, iy as usize)
    })
}

fn convolve_separable(img: &GrayImage, kernel: &[f64]) -> GrayImage {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let mut tmp = vec![0.0f64; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = (x + k as isize - r).clamp(0, w - 1);
                acc += kv * img.pixels[(y * w + sx) as usize] as f64;
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = (y + k as isize - r).clamp(0, h - 1);
                acc += kv * tmp[(sy * w + x) as usize];
            }
            out.push(acc.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: out,
    }
}

pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    convolve_separable(img, &k)
}

pub fn average_blur(img: &GrayImage, ksize: usize) -> GrayImage {
    if ksize <= 1 {
        return img.clone();
    }
    // even sizes round up to the next odd width
    let n = ksize | 1;
    convolve_separable(img, &vec![1.0 / n as f64; n])
}

/// `255·(v/255)^gamma`.
pub fn gamma_contrast(img: &GrayImage, gamma: f64) -> GrayImage {
    let lut: Vec<u8> = (0..256)
        .map(|v| (255.0 * (v as f64 / 255.0).powf(gamma)).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&p| lut[p as usize]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let img = GrayImage::new(8, 8, (0..64).map(|i| (i * 3) as u8).collect()).unwrap();
        assert_eq!(resize(&img, 8), img);
    }

    #[test]
    fn nearest_upsample_duplicates_blocks() {
        let m = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let up = resize_mask(&m, 4);
        let expect = [1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1];
        assert_eq!(up.data, expect);
    }

    #[test]
    fn mask_resize_stays_binary() {
        let m = Mask::from_fn(37, 37, |x, y| (x * y) % 7 == 0);
        let r = resize_mask(&m, 64);
        assert!(r.data.iter().all(|&v| v <= 1));
    }

    #[test]
    fn rotation_by_90_moves_right_to_top() {
        let h = Homography::rotation(5, 5, 90.0);
        // output pixel above the centre samples the source pixel right of it
        let (sx, sy) = h.apply(2.0, 0.0);
        assert!((sx - 4.0).abs() < 1e-12 && (sy - 2.0).abs() < 1e-12);
    }

    #[test]
    fn homography_from_points_recovers_identity() {
        let pts = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        let h = Homography::from_points(pts, pts).unwrap();
        for (a, b) in h.0.iter().zip(Homography::identity().0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_one_is_identity() {
        let img = GrayImage::new(4, 4, (0..16).map(|i| (i * 16) as u8).collect()).unwrap();
        assert_eq!(gamma_contrast(&img, 1.0), img);
        assert_eq!(gaussian_blur(&GrayImage::filled(9, 9, 77), 1.5), GrayImage::filled(9, 9, 77));
        assert_eq!(average_blur(&GrayImage::filled(9, 9, 77), 3), GrayImage::filled(9, 9, 77));
    }
}
