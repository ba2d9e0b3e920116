//! 8-bit RGB rasters and their unit-range tensor view.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "rgb buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// BT.601 luma of one pixel.
    pub fn luma(&self, y: usize, x: usize) -> f64 {
        0.299 * self.pixel(0, y, x) as f64
            + 0.587 * self.pixel(1, y, x) as f64
            + 0.114 * self.pixel(2, y, x) as f64
    }

    /// Planar `(3, H, W)` tensor with values `v / 255`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(3, self.height, self.width, |c, y, x| {
            self.pixel(c, y, x) as f32 / 255.0
        })
    }

    /// Clamps to `[0, 1]` and rounds `v * 255` half away from zero.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        Ok(Self::from_fn(w, h, |ch, y, x| quantize_unit(t.get(ch, y, x))))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        Image::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image::save_buffer_with_format(
            path.as_ref(),
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }
}

#[inline]
pub fn quantize_unit(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
