//! Grayscale images, binary masks, preprocessing and paired augmentation.

pub mod augment;
pub mod clahe;
pub mod geom;

use std::path::Path;

use thiserror::Error;

pub use augment::{augment, build_augmented_set, AugSpec};
pub use clahe::clahe;
pub use geom::{resize, resize_mask};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("empty image")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("png {path}: {source}")]
    Png {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width * height != pixels.len() {
            return Err(ImagingError::Dimensions(format!(
                "{width}×{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        encode_png(self.width, self.height, &self.pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImagingError> {
        crate::format::write_atomic(path, &self.to_png_bytes())?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, ImagingError> {
        let img = image::open(path).map_err(|source| ImagingError::Png {
            path: path.display().to_string(),
            source,
        })?;
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            pixels: g.into_raw(),
        })
    }

    /// Network input encoding: intensities mapped linearly onto `[-1, 1]`.
    pub fn to_input(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect()
    }
}

/// Binary mask holding 0/1 per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width * height != data.len() {
            return Err(ImagingError::Dimensions(format!(
                "{width}×{height} mask with {} pixels",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(ImagingError::InvalidParameter("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a & b).collect(),
        }
    }

    /// Centroid `(cx, cy)` of foreground pixels, `None` when empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Tight bounding box `(x, y, w, h)` of the foreground.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let px: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        encode_png(self.width, self.height, &px)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImagingError> {
        crate::format::write_atomic(path, &self.to_png_bytes())?;
        Ok(())
    }

    /// Loads a 0/255 PNG; intensities ≥ 128 are foreground.
    pub fn load_png(path: &Path) -> Result<Self, ImagingError> {
        let g = GrayImage::load_png(path)?;
        Ok(Self {
            width: g.width,
            height: g.height,
            data: g.pixels.iter().map(|&p| u8::from(p >= 128)).collect(),
        })
    }
}

fn encode_png(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(pixels, width as u32, height as u32, image::ExtendedColorType::L8)
        .expect("in-memory png encoding");
    out
}

/// RGB image used for overlays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            pixels: img.pixels.iter().map(|&p| [p, p, p]).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImagingError> {
        use image::ImageEncoder;
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&raw, self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|source| ImagingError::Png {
                path: path.display().to_string(),
                source,
            })?;
        crate::format::write_atomic(path, &out)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(5, 3, (0..15).map(|i| (i * 17) as u8).collect()).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(GrayImage::load_png(&p).unwrap(), img);
        let m = Mask::from_fn(4, 4, |x, y| x == y);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(Mask::load_png(&p).unwrap(), m);
    }

    #[test]
    fn centroid_and_bbox() {
        let m = Mask::from_fn(10, 10, |x, y| (2..5).contains(&x) && (6..8).contains(&y));
        assert_eq!(m.centroid(), Some((3.0, 6.5)));
        assert_eq!(m.bbox(), Some((2, 6, 3, 2)));
        assert_eq!(Mask::empty(3, 3).centroid(), None);
    }
}
