use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Pixel values are kept on the 2⁻²⁴ grid, the finest grid on which
/// `x − 0.5` is exact in `f32` for every `x ∈ [0, 1]`.
const GRID: f32 = 16_777_216.0;

pub fn snap(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * GRID).round() / GRID
}

/// RGB image, row-major `[H × W × 3]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image, clamping to `[0, 1]` and snapping to the pixel grid.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 || height == 0 || width == 0 {
            return Err(Error::dim("image", &[height, width, 3], &[data.len()]));
        }
        Ok(Image {
            height,
            width,
            data: data.into_iter().map(snap).collect(),
        })
    }

    /// Wraps values without clamping or snapping.
    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim("image", &[height, width, 3], &[data.len()]));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).map(snap));
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, v: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&v.map(snap));
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Values clamped to `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Image::from_fn(h, w, |y, x| {
            img.get_pixel(x as u32, y as u32)
                .0
                .map(|v| v as f32 / 255.0)
        })
    }

    /// Writes an 8-bit RGB PNG; values are clamped at write time.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    /// Quantises to 8 bits and back, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        Image::from_rgb8(&self.to_rgb8())
    }
}

/// Binary pixel mask, row-major `[H × W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("mask", &[height, width], &[data.len()]));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn fraction(&self) -> f64 {
        self.area() as f64 / self.data.len() as f64
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }

    pub fn to_luma8(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) {
                255
            } else {
                0
            }])
        })
    }

    /// Writes a single-channel PNG with values in {0, 255}.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Mask {
            height: h,
            width: w,
            data: img.pixels().map(|p| p.0[0] >= 128).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(8, 6, |y, x| [y as f32 / 7.0, x as f32 / 5.0, 0.5]).quantized();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);

        let mut m = Mask::empty(8, 6);
        m.set(3, 2, true);
        let q = dir.path().join("m.png");
        m.save_png(&q).unwrap();
        assert_eq!(Mask::load_png(&q).unwrap(), m);
    }
}
