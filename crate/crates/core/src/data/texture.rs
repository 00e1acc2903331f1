use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::image::Image;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TextureKind {
    Stripes,
    Checker,
    Noise,
    Cellular,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [
        TextureKind::Stripes,
        TextureKind::Checker,
        TextureKind::Noise,
        TextureKind::Cellular,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Stripes => "stripes",
            TextureKind::Checker => "checker",
            TextureKind::Noise => "noise",
            TextureKind::Cellular => "cellular",
        }
    }
}

impl fmt::Display for TextureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TextureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TextureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unsupported texture kind {s:?}")))
    }
}

fn color<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [0; 3].map(|_| rng.random_range(lo..hi))
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

/// Defect-free texture, a pure function of `(kind, seed, size)`.
pub fn gen_normal(kind: TextureKind, seed: u64, size: usize) -> Result<Image> {
    if size < 16 || !size.is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "image size {size} must be even and at least 16"
        )));
    }
    let mut rng = rng::stream(seed, kind.name(), 0);
    let img = match kind {
        TextureKind::Stripes => {
            let theta = rng.random_range(0.0..PI);
            let period = rng.random_range(5.0f32..11.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (a, b) = (color(&mut rng, 0.2, 0.5), color(&mut rng, 0.5, 0.8));
            let (c, s) = (theta.cos(), theta.sin());
            Image::from_fn(size, size, |y, x| {
                let u = (x as f32 * c + y as f32 * s) * 2.0 * PI / period + phase;
                mix(a, b, 0.5 + 0.5 * u.sin())
            })
        }
        TextureKind::Checker => {
            let cell = rng.random_range(4..=8usize);
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            let (a, b) = (color(&mut rng, 0.25, 0.5), color(&mut rng, 0.5, 0.75));
            Image::from_fn(size, size, |y, x| {
                if ((x + ox) / cell + (y + oy) / cell) % 2 == 0 {
                    a
                } else {
                    b
                }
            })
        }
        TextureKind::Noise => {
            // Value noise on a coarse lattice, bilinearly interpolated.
            let step = 4usize;
            let n = size / step + 2;
            let lattice: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let base = color(&mut rng, 0.35, 0.65);
            let tint = color(&mut rng, 0.5, 1.0);
            let amp = rng.random_range(0.1f32..0.2);
            Image::from_fn(size, size, |y, x| {
                let (fy, fx) = (y as f32 / step as f32, x as f32 / step as f32);
                let (iy, ix) = (fy as usize, fx as usize);
                let (ty, tx) = (fy - iy as f32, fx - ix as f32);
                let at = |yy: usize, xx: usize| lattice[yy * n + xx];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                let v = top * (1.0 - ty) + bot * ty;
                [0, 1, 2].map(|i| base[i] + amp * tint[i] * v)
            })
        }
        TextureKind::Cellular => {
            let count = rng.random_range(6..=12usize);
            let pts: Vec<(f32, f32)> = (0..count)
                .map(|_| {
                    (
                        rng.random_range(0.0..size as f32),
                        rng.random_range(0.0..size as f32),
                    )
                })
                .collect();
            let (a, b) = (color(&mut rng, 0.25, 0.5), color(&mut rng, 0.5, 0.75));
            let scale = size as f32 / (count as f32).sqrt();
            Image::from_fn(size, size, |y, x| {
                let d = pts
                    .iter()
                    .map(|&(py, px)| ((py - y as f32).powi(2) + (px - x as f32).powi(2)).sqrt())
                    .fold(f32::INFINITY, f32::min);
                mix(b, a, (d / scale).min(1.0))
            })
        }
    };
    Ok(img)
}
