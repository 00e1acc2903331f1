//! Exactly invertible pixel/latent codec: space-to-depth followed by a fixed
//! affine normalisation `z = (v − μ) / σ` with `μ = 0.5`, `σ = 0.25`.
//!
//! Both constants are powers of two or exact halves, so for pixel values on
//! the image grid every step is exact and `decode(encode(x)) == x` bitwise.

use crate::data::{Image, Mask};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LATENT_MEAN: f64 = 0.5;
pub const LATENT_SCALE: f64 = 0.25;

/// Space-to-depth factor `f`; latents have `3·f²` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentSpec {
    pub factor: usize,
}

impl LatentSpec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Validation("latent factor must be positive".into()));
        }
        Ok(LatentSpec { factor })
    }

    pub fn channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    /// Latent grid size for an image, or a shape error when not divisible.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.factor;
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) || height == 0 || width == 0 {
            return Err(Error::dim("latent grid", &[height, width], &[f, f]));
        }
        Ok((height / f, width / f))
    }
}

/// Maps an image to a `[h, w, 3·f²]` latent. Channels within a latent cell are
/// ordered by sub-row, sub-column, then colour.
pub fn encode<F: Real>(image: &Image, spec: LatentSpec) -> Result<Tensor<F>> {
    let (h, w) = spec.grid(image.height(), image.width())?;
    let f = spec.factor;
    let (mu, sigma) = (F::lit(LATENT_MEAN), F::lit(LATENT_SCALE));
    let mut data = Vec::with_capacity(h * w * spec.channels());
    for y in 0..h {
        for x in 0..w {
            for dy in 0..f {
                for dx in 0..f {
                    let p = image.pixel(y * f + dy, x * f + dx);
                    data.extend(p.map(|v| (F::lit(v as f64) - mu) / sigma));
                }
            }
        }
    }
    Tensor::new(&[h, w, spec.channels()], data)
}

/// Inverse of [`encode`]. Values are not clamped.
pub fn decode<F: Real>(latent: &Tensor<F>, spec: LatentSpec) -> Result<Image> {
    let (h, w) = match latent.shape() {
        &[h, w, c] if c == spec.channels() => (h, w),
        s => return Err(Error::dim("decode", s, &[0, 0, spec.channels()])),
    };
    let f = spec.factor;
    let (mu, sigma) = (F::lit(LATENT_MEAN), F::lit(LATENT_SCALE));
    let (height, width) = (h * f, w * f);
    let mut data = vec![0f32; height * width * 3];
    let src = latent.data();
    let mut i = 0;
    for y in 0..h {
        for x in 0..w {
            for dy in 0..f {
                for dx in 0..f {
                    let o = ((y * f + dy) * width + x * f + dx) * 3;
                    for c in 0..3 {
                        data[o + c] = (src[i] * sigma + mu).as_f64() as f32;
                        i += 1;
                    }
                }
            }
        }
    }
    Image::from_raw(height, width, data)
}

/// Latent-resolution mask: a cell is set iff any pixel it covers is set.
pub fn downsample_mask(mask: &Mask, spec: LatentSpec) -> Result<Mask> {
    let (h, w) = spec.grid(mask.height(), mask.width())?;
    let f = spec.factor;
    let mut out = Mask::empty(h, w);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                out.set(y / f, x / f, true);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::snap;

    #[test]
    fn shape_and_constant_image() {
        let spec = LatentSpec::new(4).unwrap();
        let img = Image::new(32, 32, vec![0.75; 32 * 32 * 3]).unwrap();
        let z: Tensor<f32> = encode(&img, spec).unwrap();
        assert_eq!(z.shape(), &[8, 8, 48]);
        assert!(z.data().iter().all(|&v| v == 1.0));
        let zero = Tensor::<f32>::zeros(&[8, 8, 48]);
        let back = decode(&zero, spec).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.5));
        assert!(encode::<f32>(&Image::new(30, 32, vec![0.0; 30 * 32 * 3]).unwrap(), spec).is_err());
    }

    #[test]
    fn roundtrip_is_exact() {
        let spec = LatentSpec::new(2).unwrap();
        let img = Image::from_fn(8, 6, |y, x| {
            [
                snap(y as f32 * 0.1 + 1e-3),
                snap(x as f32 / 7.0),
                0.123_456_7,
            ]
        });
        let z: Tensor<f32> = encode(&img, spec).unwrap();
        assert_eq!(decode(&z, spec).unwrap(), img);
        let z64: Tensor<f64> = encode(&img, spec).unwrap();
        assert_eq!(decode(&z64, spec).unwrap(), img);
    }

    #[test]
    fn mask_any_rule() {
        let spec = LatentSpec::new(4).unwrap();
        assert!(downsample_mask(&Mask::empty(32, 32), spec)
            .unwrap()
            .is_empty());
        assert_eq!(
            downsample_mask(&Mask::full(32, 32), spec).unwrap(),
            Mask::full(8, 8)
        );
        let mut m = Mask::empty(32, 32);
        m.set(13, 30, true);
        let d = downsample_mask(&m, spec).unwrap();
        assert_eq!(d.area(), 1);
        assert!(d.get(3, 7));
    }
}
