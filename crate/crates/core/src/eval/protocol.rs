use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;

use super::metrics::auroc;
use super::segmenter::{train_segmenter, SegExample, SegmenterConfig, SegmenterTraining};
use crate::data::{Image, Mask};
use crate::error::{Error, Result};

/// One reported value with the sample count and seeds behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub count: usize,
    pub seeds: Vec<u64>,
}

/// Named metrics of one run.
///
/// Text form: `config_hash = <hex>` followed by one line per metric,
/// `<name> = <value> count=<n> seeds=<s1,s2,...>`. The tab-separated form
/// has the header `metric\tvalue\tcount\tseeds`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub config_hash: String,
    pub metrics: Vec<Metric>,
}

impl MetricReport {
    pub fn new(config_hash: impl Into<String>) -> Self {
        MetricReport {
            config_hash: config_hash.into(),
            metrics: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64, count: usize, seeds: &[u64]) {
        self.metrics.push(Metric {
            name: name.into(),
            value,
            count,
            seeds: seeds.to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }

    fn seed_list(seeds: &[u64]) -> String {
        seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("config_hash = {}\n", self.config_hash);
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{} = {} count={} seeds={}",
                m.name,
                m.value,
                m.count,
                Self::seed_list(&m.seeds)
            );
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\tcount\tseeds\n");
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                m.name,
                m.value,
                m.count,
                Self::seed_list(&m.seeds)
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format(format!("bad report line {line:?}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty report".into()))?;
        let hash = first
            .strip_prefix("config_hash = ")
            .ok_or_else(|| bad(first))?;
        let mut report = MetricReport::new(hash);
        for line in lines {
            let (name, rest) = line.split_once(" = ").ok_or_else(|| bad(line))?;
            let mut parts = rest.split(' ');
            let value = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(line))?;
            let count = parts
                .next()
                .and_then(|c| c.strip_prefix("count="))
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad(line))?;
            let seeds = parts
                .next()
                .and_then(|s| s.strip_prefix("seeds="))
                .ok_or_else(|| bad(line))?;
            let seeds = if seeds.is_empty() {
                Vec::new()
            } else {
                seeds
                    .split(',')
                    .map(|s| s.parse().map_err(|_| bad(line)))
                    .collect::<Result<_>>()?
            };
            report.push(name, value, count, &seeds);
        }
        Ok(report)
    }
}

/// An image with its ground-truth mask and the ids of the dataset samples
/// it was built from.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub origins: Vec<usize>,
    pub image: Image,
    pub mask: Mask,
}

/// Whether training and test sets may share source samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Overlap {
    Reject,
    /// Only for checking that the protocol detects overfitting.
    Allow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamScores {
    pub pixel_auroc: f64,
    pub image_auroc: f64,
    pub test_images: usize,
    pub losses: Vec<f64>,
}

/// Trains a segmenter on `train` and scores it on `test`: pixel AUROC over
/// every test pixel, and image AUROC with the maximum pixel score as the
/// image score.
pub fn downstream_protocol(
    train: &[LabeledImage],
    test: &[LabeledImage],
    config: SegmenterConfig,
    training: SegmenterTraining,
    seed: u64,
    overlap: Overlap,
) -> Result<DownstreamScores> {
    if overlap == Overlap::Reject {
        let seen: BTreeSet<usize> = train
            .iter()
            .flat_map(|l| l.origins.iter().copied())
            .collect();
        if let Some(id) = test
            .iter()
            .flat_map(|l| &l.origins)
            .find(|id| seen.contains(id))
        {
            return Err(Error::Protocol(format!(
                "sample {id} appears in both training and test sets"
            )));
        }
    }
    let examples: Vec<SegExample> = train
        .iter()
        .map(|l| SegExample {
            image: l.image.clone(),
            mask: l.mask.clone(),
        })
        .collect();
    let (model, losses) = train_segmenter(config, training, &examples, seed)?;
    let images: Vec<&Image> = test.iter().map(|l| &l.image).collect();
    let scores = model.predict(&images)?;
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    let mut image_scores = Vec::with_capacity(test.len());
    let mut image_labels = Vec::with_capacity(test.len());
    for (s, l) in scores.iter().zip(test) {
        pixel_scores.extend_from_slice(s);
        pixel_labels.extend_from_slice(l.mask.data());
        image_scores.push(s.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        image_labels.push(!l.mask.is_empty());
    }
    Ok(DownstreamScores {
        pixel_auroc: auroc(&pixel_scores, &pixel_labels)?,
        image_auroc: auroc(&image_scores, &image_labels)?,
        test_images: test.len(),
        losses,
    })
}

/// Crop-paste augmentation: the masked pixels are overwritten with the
/// pixels of the same image at a random nonzero offset that keeps the
/// shifted mask inside the frame.
pub fn crop_paste<R: Rng + ?Sized>(image: &Image, mask: &Mask, rng: &mut R) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::dim(
            "crop_paste",
            &[h, w],
            &[mask.height(), mask.width()],
        ));
    }
    let cells: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| mask.data()[i])
        .map(|i| (i / w, i % w))
        .collect();
    if cells.is_empty() {
        return Ok(image.clone());
    }
    let (y0, y1) = cells
        .iter()
        .fold((h, 0), |(lo, hi), &(y, _)| (lo.min(y), hi.max(y)));
    let (x0, x1) = cells
        .iter()
        .fold((w, 0), |(lo, hi), &(_, x)| (lo.min(x), hi.max(x)));
    // Offsets keep the whole bounding box inside the frame.
    let dy_range = (-(y0 as i64), (h - 1 - y1) as i64);
    let dx_range = (-(x0 as i64), (w - 1 - x1) as i64);
    if dy_range == (0, 0) && dx_range == (0, 0) {
        return Err(Error::Contract(
            "mask covers the whole frame; no crop offset exists".into(),
        ));
    }
    let (dy, dx) = loop {
        let dy = rng.random_range(dy_range.0..=dy_range.1);
        let dx = rng.random_range(dx_range.0..=dx_range.1);
        if (dy, dx) != (0, 0) {
            break (dy, dx);
        }
    };
    let mut out = image.clone();
    for (y, x) in cells {
        let sy = (y as i64 + dy) as usize;
        let sx = (x as i64 + dx) as usize;
        out.set_pixel(y, x, image.pixel(sy, sx));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn report_roundtrip() {
        let mut r = MetricReport::new("abc123");
        r.push("pixel_auroc", 0.91, 1024, &[0, 1]);
        r.push("diversity", 0.125, 50, &[]);
        let back = MetricReport::from_text(&r.to_text()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.to_tsv().lines().count(), 3);
        assert!(r.to_tsv().starts_with("metric\tvalue\tcount\tseeds\n"));
        assert!(MetricReport::from_text("nope").is_err());
    }

    fn labeled(origin: usize, bright: bool) -> LabeledImage {
        let mut mask = Mask::empty(8, 8);
        let mut image = Image::from_fn(8, 8, |y, x| [0.2 + 0.02 * ((y + x) % 3) as f32; 3]);
        if bright {
            for y in 2..5 {
                for x in 3..6 {
                    mask.set(y, x, true);
                    image.set_pixel(y, x, [0.9; 3]);
                }
            }
        }
        LabeledImage {
            origins: vec![origin],
            image,
            mask,
        }
    }

    #[test]
    fn overlapping_sets_are_rejected() {
        let train = vec![labeled(1, true), labeled(2, false)];
        let test = vec![labeled(2, true), labeled(3, false)];
        let config = SegmenterConfig::new(8, 4).unwrap();
        let training = SegmenterTraining {
            steps: 1,
            batch_size: 2,
            learning_rate: 1e-3,
            weight_decay: 0.0,
        };
        let err =
            downstream_protocol(&train, &test, config, training, 0, Overlap::Reject).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert!(downstream_protocol(&train, &test, config, training, 0, Overlap::Allow).is_ok());
    }

    #[test]
    fn crop_paste_moves_texture_into_the_mask() {
        let image = Image::from_fn(8, 8, |y, x| [y as f32 / 8.0, x as f32 / 8.0, 0.5]);
        let mut mask = Mask::empty(8, 8);
        mask.set(3, 3, true);
        mask.set(3, 4, true);
        let mut r = rng::stream(0, "test", 0);
        let out = crop_paste(&image, &mask, &mut r).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if !mask.get(y, x) {
                    assert_eq!(out.pixel(y, x), image.pixel(y, x));
                }
            }
        }
        assert_ne!(out.pixel(3, 3), image.pixel(3, 3));
        // Both pasted pixels come from one rigid shift.
        let a = out.pixel(3, 3);
        let b = out.pixel(3, 4);
        assert_eq!(a[0], b[0]);
        assert!((b[1] - a[1] - 1.0 / 8.0).abs() < 1e-6);
        assert!(crop_paste(&image, &Mask::full(8, 8), &mut r).is_err());
    }
}
