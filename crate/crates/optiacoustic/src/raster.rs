//! Row-major RGB images and depth maps, plus the binary depth file format.

use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image dimensions {0}x{1} invalid")]
    BadDimensions(usize, usize),
    #[error("pixel ({0}, {1}) outside {2}x{3}")]
    OutOfBounds(usize, usize, usize, usize),
    #[error("depth file: {0}")]
    BadDepthFile(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit RGB image, row-major, top-left origin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    /// `3 * width * height` bytes, RGB interleaved.
    pub data: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::BadDimensions(width, height));
        }
        Ok(Self { width, height, data: vec![0; 3 * width * height] })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [u8; 3] {
        let i = 3 * (v * self.width + u);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, rgb: [u8; 3]) {
        let i = 3 * (v * self.width + u);
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| RasterError::Png("buffer size mismatch".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| RasterError::Png(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path).map_err(|e| RasterError::Png(e.to_string()))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self { width: w, height: h, data: img.into_raw() })
    }
}

/// Per-pixel ray lengths in meters; NaN marks pixels with no return.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
const DEPTH_VERSION: u32 = 1;

impl DepthImage {
    pub fn new_invalid(width: usize, height: usize) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::BadDimensions(width, height));
        }
        Ok(Self { width, height, data: vec![f32::NAN; width * height] })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, depth: f32) {
        self.data[v * self.width + u] = depth;
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.get(u, v).is_finite()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| d.is_finite()).count()
    }

    /// Binary layout: magic "DPTH", u32 version, u32 height, u32 width,
    /// then `height*width` little-endian f32 row-major. Invalid pixels are
    /// stored as 0 and mapped back to NaN on read.
    pub fn save(&self, path: &Path) -> Result<(), RasterError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(DEPTH_MAGIC)?;
        f.write_all(&DEPTH_VERSION.to_le_bytes())?;
        f.write_all(&(self.height as u32).to_le_bytes())?;
        f.write_all(&(self.width as u32).to_le_bytes())?;
        for &d in &self.data {
            let stored = if d.is_finite() && d > 0.0 { d } else { 0.0 };
            f.write_all(&stored.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != DEPTH_MAGIC {
            return Err(RasterError::BadDepthFile("bad magic".into()));
        }
        let version = read_u32(&mut f)?;
        if version != DEPTH_VERSION {
            return Err(RasterError::BadDepthFile(format!("unsupported version {version}")));
        }
        let height = read_u32(&mut f)? as usize;
        let width = read_u32(&mut f)? as usize;
        if width == 0 || height == 0 || width * height > 100_000_000 {
            return Err(RasterError::BadDepthFile(format!("dimensions {width}x{height}")));
        }
        let mut data = vec![0f32; width * height];
        let mut buf = [0u8; 4];
        for d in data.iter_mut() {
            f.read_exact(&mut buf)?;
            let v = f32::from_le_bytes(buf);
            *d = if v > 0.0 && v.is_finite() { v } else { f32::NAN };
        }
        Ok(Self { width, height, data })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, RasterError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_set_get() {
        let mut img = ImageRgb::new(4, 3).unwrap();
        img.set(2, 1, [10, 20, 30]);
        assert_eq!(img.get(2, 1), [10, 20, 30]);
        assert_eq!(img.get(0, 0), [0, 0, 0]);
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(ImageRgb::new(0, 5).is_err());
        assert!(DepthImage::new_invalid(5, 0).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = ImageRgb::new(7, 5).unwrap();
        for v in 0..5 {
            for u in 0..7 {
                img.set(u, v, [(u * 30) as u8, (v * 40) as u8, 200]);
            }
        }
        img.save_png(&path).unwrap();
        let back = ImageRgb::load_png(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn depth_round_trip_preserves_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let mut d = DepthImage::new_invalid(3, 2).unwrap();
        d.set(0, 0, 1.5);
        d.set(2, 1, 0.25);
        assert_eq!(d.valid_count(), 2);
        d.save(&path).unwrap();
        let back = DepthImage::load(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        assert_eq!(back.get(0, 0), 1.5);
        assert_eq!(back.get(2, 1), 0.25);
        assert!(!back.is_valid(1, 0));
        assert_eq!(back.valid_count(), 2);
    }

    #[test]
    fn depth_load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not a depth file at all").unwrap();
        assert!(DepthImage::load(&path).is_err());
    }
}
