//! Contrast-limited adaptive histogram equalization.

use super::{GrayImage, ImagingError};

pub const DEFAULT_CLIP_LIMIT: f64 = 2.0;
pub const DEFAULT_TILES: (usize, usize) = (8, 8);

const BINS: usize = 256;

/// Reflect-101 index into `[0, n)`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Equalizes each of `tiles = (tx, ty)` tiles with a clipped histogram and
/// blends neighbouring tile mappings bilinearly. Clipped excess is spread
/// uniformly over all bins. When the tile grid does not divide the image,
/// the image is reflect-padded for histogram collection.
pub fn clahe(img: &GrayImage, clip_limit: f64, tiles: (usize, usize)) -> Result<GrayImage, ImagingError> {
    if img.width == 0 || img.height == 0 {
        return Err(ImagingError::Empty);
    }
    let (tx, ty) = tiles;
    if tx == 0 || ty == 0 {
        return Err(ImagingError::InvalidParameter("tile grid must be at least 1×1".into()));
    }
    if !(clip_limit > 0.0) {
        return Err(ImagingError::InvalidParameter(format!("clip limit must be positive, got {clip_limit}")));
    }
    let tw = img.width.div_ceil(tx);
    let th = img.height.div_ceil(ty);
    let area = tw * th;
    let clip = ((clip_limit * area as f64 / BINS as f64) as usize).max(1);
    let lut_scale = (BINS - 1) as f64 / area as f64;

    let mut luts = vec![[0u8; BINS]; tx * ty];
    for j in 0..ty {
        for i in 0..tx {
            let mut hist = [0usize; BINS];
            for y in 0..th {
                let sy = reflect((j * th + y) as isize, img.height);
                for x in 0..tw {
                    let sx = reflect((i * tw + x) as isize, img.width);
                    hist[img.get(sx, sy) as usize] += 1;
                }
            }
            let mut excess = 0;
            for h in hist.iter_mut() {
                if *h > clip {
                    excess += *h - clip;
                    *h = clip;
                }
            }
            let batch = excess / BINS;
            let mut residual = excess - batch * BINS;
            for h in hist.iter_mut() {
                *h += batch;
            }
            if residual > 0 {
                let step = (BINS / residual).max(1);
                let mut k = 0;
                while k < BINS && residual > 0 {
                    hist[k] += 1;
                    residual -= 1;
                    k += step;
                }
            }
            let lut = &mut luts[j * tx + i];
            let mut cum = 0;
            for (b, h) in hist.iter().enumerate() {
                cum += h;
                lut[b] = (cum as f64 * lut_scale).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        let fy = (y as f64 + 0.5) / th as f64 - 0.5;
        let y0 = fy.floor();
        let wy = fy - y0;
        let ty0 = (y0.max(0.0) as usize).min(ty - 1);
        let ty1 = ((y0 + 1.0).max(0.0) as usize).min(ty - 1);
        for x in 0..img.width {
            let fx = (x as f64 + 0.5) / tw as f64 - 0.5;
            let x0 = fx.floor();
            let wx = fx - x0;
            let tx0 = (x0.max(0.0) as usize).min(tx - 1);
            let tx1 = ((x0 + 1.0).max(0.0) as usize).min(tx - 1);
            let v = img.get(x, y) as usize;
            let a = luts[ty0 * tx + tx0][v] as f64;
            let b = luts[ty0 * tx + tx1][v] as f64;
            let c = luts[ty1 * tx + tx0][v] as f64;
            let d = luts[ty1 * tx + tx1][v] as f64;
            let top = a + (b - a) * wx;
            let bot = c + (d - c) * wx;
            out.push((top + (bot - top) * wy).round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(img.width, img.height, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn support(img: &GrayImage) -> u8 {
        let lo = *img.pixels.iter().min().unwrap();
        let hi = *img.pixels.iter().max().unwrap();
        hi - lo
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = GrayImage::filled(64, 48, 90);
        let out = clahe(&img, DEFAULT_CLIP_LIMIT, DEFAULT_TILES).unwrap();
        assert_eq!((out.width, out.height), (64, 48));
        assert!(out.pixels.iter().all(|&p| p == out.pixels[0]));
    }

    #[test]
    fn low_contrast_ramp_gets_wider_support() {
        let w = 64;
        let px: Vec<u8> = (0..w * w).map(|i| 100 + ((i % w) * 20 / w) as u8).collect();
        let img = GrayImage::new(w, w, px).unwrap();
        let out = clahe(&img, DEFAULT_CLIP_LIMIT, DEFAULT_TILES).unwrap();
        assert!(support(&out) > support(&img), "{} vs {}", support(&out), support(&img));
    }

    #[test]
    fn deterministic_and_non_divisible_tiles() {
        let px: Vec<u8> = (0..37 * 23).map(|i| ((i * 31) % 251) as u8).collect();
        let img = GrayImage::new(37, 23, px).unwrap();
        let a = clahe(&img, 2.0, (8, 8)).unwrap();
        let b = clahe(&img, 2.0, (8, 8)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width, a.height), (37, 23));
    }

    #[test]
    fn rejects_empty() {
        let img = GrayImage {
            width: 0,
            height: 0,
            pixels: vec![],
        };
        assert!(matches!(clahe(&img, 2.0, (8, 8)), Err(ImagingError::Empty)));
    }
}
