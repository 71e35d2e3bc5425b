use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Grayscale image with ink as high values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bitmap {
    pub height: usize,
    pub width: usize,
    /// Row-major pixels.
    pub data: Vec<f32>,
}

impl Bitmap {
    pub fn new(height: usize, width: usize) -> Self {
        Bitmap {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f32>() / self.data.len() as f32
        }
    }

    /// Rounds every pixel to the nearest 8-bit level.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Copy placed at the top-left of a larger zero canvas.
    pub fn padded(&self, height: usize, width: usize) -> Bitmap {
        let mut out = Bitmap::new(height, width);
        for y in 0..self.height.min(height) {
            for x in 0..self.width.min(width) {
                out.set(y, x, self.get(y, x));
            }
        }
        out
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&[self.height, self.width], self.data.iter().map(|&v| T::of(f64::from(v))).collect())
            .expect("bitmap extents match its buffer")
    }

    /// Decodes a PNG or PGM file. Black-on-white inputs are inverted so ink is
    /// always the high value.
    pub fn load(path: &Path) -> Result<Bitmap> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(source) => Error::io(path, source),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: "image has no pixels".into(),
            });
        }
        let mut bm = Bitmap {
            height: h as usize,
            width: w as usize,
            data: gray.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect(),
        };
        if bm.mean() > 0.5 {
            for v in &mut bm.data {
                *v = 1.0 - *v;
            }
        }
        Ok(bm)
    }

    /// Writes an 8-bit image; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut img = GrayImage::new(self.width as u32, self.height as u32);
        for (i, v) in self.data.iter().enumerate() {
            let px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((i % self.width) as u32, (i / self.width) as u32, Luma([px]));
        }
        img.save(path).map_err(|e| match e {
            image::ImageError::IoError(source) => Error::io(path, source),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_pgm_round_trip_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let mut bm = Bitmap::new(3, 4);
        bm.set(1, 2, 1.0);
        bm.set(0, 0, 0.3);
        bm.quantize();
        for ext in ["png", "pgm"] {
            let p = dir.path().join(format!("x.{ext}"));
            bm.save(&p).unwrap();
            assert_eq!(Bitmap::load(&p).unwrap(), bm);
        }
    }

    #[test]
    fn dark_ink_on_white_is_inverted() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = GrayImage::from_pixel(4, 2, Luma([255]));
        img.put_pixel(1, 1, Luma([0]));
        let p = dir.path().join("w.png");
        img.save(&p).unwrap();
        let bm = Bitmap::load(&p).unwrap();
        assert_eq!(bm.get(1, 1), 1.0);
        assert_eq!(bm.get(0, 0), 0.0);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(Bitmap::load(Path::new("/nonexistent/a.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn padding_keeps_content_top_left() {
        let mut bm = Bitmap::new(1, 1);
        bm.set(0, 0, 0.5);
        let p = bm.padded(2, 3);
        assert_eq!(p.data, vec![0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
