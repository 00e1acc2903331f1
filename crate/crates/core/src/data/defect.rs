use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::image::{snap, Image, Mask};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DefectKind {
    Scratch,
    Spot,
    Crack,
    Contamination,
}

impl DefectKind {
    pub const ALL: [DefectKind; 4] = [
        DefectKind::Scratch,
        DefectKind::Spot,
        DefectKind::Crack,
        DefectKind::Contamination,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Scratch => "scratch",
            DefectKind::Spot => "spot",
            DefectKind::Crack => "crack",
            DefectKind::Contamination => "contamination",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        DefectKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Colour the defect blends towards.
    pub fn color(self) -> [f32; 3] {
        match self {
            DefectKind::Scratch => [0.97, 0.97, 0.95],
            DefectKind::Spot => [0.08, 0.06, 0.04],
            DefectKind::Crack => [0.02, 0.02, 0.03],
            DefectKind::Contamination => [0.62, 0.28, 0.08],
        }
    }
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefectKind::from_name(s)
            .ok_or_else(|| Error::Validation(format!("unsupported defect kind {s:?}")))
    }
}

/// Defect footprint in pixel coordinates `(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Polyline {
        points: Vec<(f32, f32)>,
        width: f32,
    },
    Disk {
        center: (f32, f32),
        radius: f32,
    },
    Branches {
        origin: (f32, f32),
        branch_count: usize,
        branch_length: f32,
    },
    Blob {
        center: (f32, f32),
        radius: f32,
        lobes: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub geometry: Geometry,
    /// Blend weight towards the defect colour, in `[0, 1]`.
    pub intensity: f32,
    pub seed: u64,
}

impl DefectSpec {
    /// Random spec of the given kind that fits a `size × size` image.
    pub fn random<R: Rng + ?Sized>(kind: DefectKind, size: usize, rng: &mut R) -> Self {
        let s = size as f32;
        let margin = s * 0.2;
        let pick = |rng: &mut R| {
            (
                rng.random_range(margin..s - margin),
                rng.random_range(margin..s - margin),
            )
        };
        let geometry = match kind {
            DefectKind::Scratch => {
                let start = pick(rng);
                let theta = rng.random_range(0.0..PI);
                let len = rng.random_range(s * 0.25..s * 0.45);
                let bend = rng.random_range(-0.3f32..0.3);
                let mid = (
                    start.0 + 0.5 * len * theta.sin(),
                    start.1 + 0.5 * len * theta.cos(),
                );
                let end = (
                    mid.0 + 0.5 * len * (theta + bend).sin(),
                    mid.1 + 0.5 * len * (theta + bend).cos(),
                );
                let clamp = |p: (f32, f32)| (p.0.clamp(1.0, s - 2.0), p.1.clamp(1.0, s - 2.0));
                Geometry::Polyline {
                    points: vec![clamp(start), clamp(mid), clamp(end)],
                    width: rng.random_range(1.6f32..2.4),
                }
            }
            DefectKind::Spot => {
                let radius = rng.random_range(s * 0.07..s * 0.13);
                let lo = radius + 1.0;
                Geometry::Disk {
                    center: (rng.random_range(lo..s - lo), rng.random_range(lo..s - lo)),
                    radius,
                }
            }
            DefectKind::Crack => Geometry::Branches {
                origin: pick(rng),
                branch_count: rng.random_range(2..=3),
                branch_length: rng.random_range(s * 0.15..s * 0.28),
            },
            DefectKind::Contamination => {
                let radius = rng.random_range(s * 0.09..s * 0.15);
                let lo = radius + 1.0;
                Geometry::Blob {
                    center: (rng.random_range(lo..s - lo), rng.random_range(lo..s - lo)),
                    radius,
                    lobes: rng.random_range(3..=5),
                }
            }
        };
        DefectSpec {
            kind,
            geometry,
            intensity: rng.random_range(0.7f32..0.95),
            seed: rng.random(),
        }
    }
}

fn inside(p: (f32, f32), h: usize, w: usize) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (h - 1) as f32 && p.1 <= (w - 1) as f32
}

fn seg_dist(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    ((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt()
}

fn raster_polyline(mask: &mut Mask, points: &[(f32, f32)], width: f32) {
    let half = width / 2.0;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let p = (y as f32, x as f32);
            if points.windows(2).any(|s| seg_dist(p, s[0], s[1]) <= half) {
                mask.set(y, x, true);
            }
        }
    }
}

fn raster_disk(mask: &mut Mask, c: (f32, f32), r: f32) {
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let (dy, dx) = (y as f32 - c.0, x as f32 - c.1);
            if dy * dy + dx * dx <= r * r {
                mask.set(y, x, true);
            }
        }
    }
}

/// Pixel footprint of a defect. Validates the geometry first.
pub fn rasterize(spec: &DefectSpec, height: usize, width: usize) -> Result<Mask> {
    if !(0.0..=1.0).contains(&spec.intensity) {
        return Err(Error::Validation(format!(
            "intensity {} outside [0, 1]",
            spec.intensity
        )));
    }
    let mut mask = Mask::empty(height, width);
    let bad = |msg: String| Err(Error::Validation(msg));
    match &spec.geometry {
        Geometry::Polyline { points, width: lw } => {
            if points.len() < 2 {
                return bad("polyline needs at least two points".into());
            }
            if points.iter().any(|&p| !inside(p, height, width)) {
                return bad("polyline leaves the image".into());
            }
            let length: f32 = points.windows(2).map(|s| seg_dist(s[1], s[0], s[0])).sum();
            if length == 0.0 {
                return bad("zero-length polyline".into());
            }
            if *lw <= 0.0 {
                return bad("polyline width must be positive".into());
            }
            raster_polyline(&mut mask, points, *lw);
        }
        &Geometry::Disk { center, radius } => {
            if radius <= 0.0 {
                return bad("disk radius must be positive".into());
            }
            if !inside((center.0 - radius, center.1 - radius), height, width)
                || !inside((center.0 + radius, center.1 + radius), height, width)
            {
                return bad("disk leaves the image".into());
            }
            raster_disk(&mut mask, center, radius);
        }
        &Geometry::Branches {
            origin,
            branch_count,
            branch_length,
        } => {
            if branch_count == 0 || branch_length <= 0.0 {
                return bad("crack needs at least one branch of positive length".into());
            }
            if !inside(origin, height, width) {
                return bad("crack origin outside the image".into());
            }
            let mut rng = rng::stream(spec.seed, "crack", 0);
            let base = rng.random_range(0.0..2.0 * PI);
            let lim = |p: (f32, f32)| {
                (
                    p.0.clamp(0.0, (height - 1) as f32),
                    p.1.clamp(0.0, (width - 1) as f32),
                )
            };
            for b in 0..branch_count {
                let mut angle =
                    base + 2.0 * PI * b as f32 / branch_count as f32 + rng.random_range(-0.4..0.4);
                let mut p = origin;
                let mut pts = vec![p];
                let mut walked = 0.0;
                while walked < branch_length {
                    angle += rng.random_range(-0.5f32..0.5);
                    p = lim((p.0 + 2.0 * angle.sin(), p.1 + 2.0 * angle.cos()));
                    pts.push(p);
                    walked += 2.0;
                }
                raster_polyline(&mut mask, &pts, 1.5);
            }
        }
        &Geometry::Blob {
            center,
            radius,
            lobes,
        } => {
            if radius <= 0.0 || lobes == 0 {
                return bad("blob needs a positive radius and at least one lobe".into());
            }
            if !inside((center.0 - radius, center.1 - radius), height, width)
                || !inside((center.0 + radius, center.1 + radius), height, width)
            {
                return bad("blob leaves the image".into());
            }
            let mut rng = rng::stream(spec.seed, "blob", 0);
            raster_disk(&mut mask, center, radius * 0.6);
            for _ in 0..lobes {
                let a = rng.random_range(0.0..2.0 * PI);
                let d = rng.random_range(0.2..0.5) * radius;
                let r = rng.random_range(0.35..0.5) * radius;
                raster_disk(
                    &mut mask,
                    (center.0 + d * a.sin(), center.1 + d * a.cos()),
                    r,
                );
            }
        }
    }
    let area = mask.area();
    if area == 0 {
        return bad("defect covers no pixels".into());
    }
    if area * 4 > height * width {
        return bad(format!(
            "defect covers {area} pixels, more than a quarter of the image"
        ));
    }
    Ok(mask)
}

/// Renders a defect. Pixels outside the returned mask are untouched, and
/// for a nonzero intensity every pixel inside it changes.
pub fn inject_defect(image: &Image, spec: &DefectSpec) -> Result<(Image, Mask)> {
    let mask = rasterize(spec, image.height(), image.width())?;
    let mut out = image.clone();
    if spec.intensity == 0.0 {
        return Ok((out, mask));
    }
    let target = spec.kind.color();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if !mask.get(y, x) {
                continue;
            }
            let v = image.pixel(y, x);
            let mut n = [0, 1, 2].map(|i| snap(v[i] + spec.intensity * (target[i] - v[i])));
            // Keep the change visible after 8-bit quantisation.
            if (0..3).all(|i| (n[i] - v[i]).abs() < 1.0 / 255.0) {
                n[0] = if v[0] < 0.5 {
                    v[0] + 1.0 / 255.0
                } else {
                    v[0] - 1.0 / 255.0
                };
            }
            out.set_pixel(y, x, n);
        }
    }
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::texture::{gen_normal, TextureKind};

    fn base() -> Image {
        gen_normal(TextureKind::Checker, 3, 32).unwrap()
    }

    #[test]
    fn zero_intensity_keeps_image_and_emits_mask() {
        let spec = DefectSpec {
            kind: DefectKind::Spot,
            geometry: Geometry::Disk {
                center: (16.0, 16.0),
                radius: 3.0,
            },
            intensity: 0.0,
            seed: 0,
        };
        let (img, mask) = inject_defect(&base(), &spec).unwrap();
        assert_eq!(img, base());
        assert!(!mask.is_empty());
    }

    #[test]
    fn disk_area_matches_enumeration() {
        for r in [1.0f32, 2.0, 3.5, 5.0] {
            let spec = DefectSpec {
                kind: DefectKind::Spot,
                geometry: Geometry::Disk {
                    center: (16.0, 16.0),
                    radius: r,
                },
                intensity: 0.5,
                seed: 0,
            };
            let (_, mask) = inject_defect(&base(), &spec).unwrap();
            // Independent count: lattice points of the closed disk.
            let ri = r.floor() as i64;
            let mut count = 0;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if ((dy * dy + dx * dx) as f32) <= r * r {
                        count += 1;
                    }
                }
            }
            assert_eq!(mask.area(), count, "radius {r}");
        }
    }

    #[test]
    fn degenerate_geometry_is_rejected() {
        let spec = DefectSpec {
            kind: DefectKind::Scratch,
            geometry: Geometry::Polyline {
                points: vec![(5.0, 5.0), (5.0, 5.0)],
                width: 1.0,
            },
            intensity: 0.5,
            seed: 0,
        };
        assert!(matches!(
            inject_defect(&base(), &spec),
            Err(Error::Validation(_))
        ));
        let huge = DefectSpec {
            kind: DefectKind::Spot,
            geometry: Geometry::Disk {
                center: (16.0, 16.0),
                radius: 15.0,
            },
            intensity: 0.5,
            seed: 0,
        };
        assert!(inject_defect(&base(), &huge).is_err());
    }

    #[test]
    fn changed_pixels_equal_mask_for_random_specs() {
        for seed in 0..200u64 {
            let mut rng = rng::stream(seed, "test", 0);
            let kind = DefectKind::ALL[(seed % 4) as usize];
            let texture = TextureKind::ALL[(seed / 4 % 4) as usize];
            let img = gen_normal(texture, seed, 32).unwrap();
            let spec = DefectSpec::random(kind, 32, &mut rng);
            let (out, mask) = inject_defect(&img, &spec).unwrap();
            assert!(mask.fraction() <= 0.25);
            for y in 0..32 {
                for x in 0..32 {
                    let changed = out.pixel(y, x) != img.pixel(y, x);
                    assert_eq!(changed, mask.get(y, x), "seed {seed} at ({y},{x})");
                }
            }
        }
    }
}
