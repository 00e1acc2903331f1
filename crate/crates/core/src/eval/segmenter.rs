use rand::Rng;

use crate::adapter::{AdamW, AdamWConfig};
use crate::codec::{self, LatentSpec};
use crate::data::{Image, Mask};
use crate::error::{Error, Result};
use crate::params::{nn, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tape, Var};

/// Pixels folded into each cell of the segmenter's input grid.
const FOLD: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmenterConfig {
    pub image_size: usize,
    pub width: usize,
}

impl SegmenterConfig {
    pub fn new(image_size: usize, width: usize) -> Result<Self> {
        if width == 0 || image_size == 0 || !image_size.is_multiple_of(2 * FOLD) {
            return Err(Error::Config(format!(
                "segmenter needs a positive width and an image size divisible by {}",
                2 * FOLD
            )));
        }
        Ok(SegmenterConfig { image_size, width })
    }

    fn grid(&self) -> usize {
        self.image_size / FOLD
    }
}

/// A binary pixel segmentation example.
#[derive(Clone, Debug)]
pub struct SegExample {
    pub image: Image,
    pub mask: Mask,
}

/// Small two-level encoder-decoder. Images are folded 2×2 into channels,
/// and each output cell carries the four logits of the pixels it covers.
#[derive(Clone, Debug)]
pub struct Segmenter<F> {
    config: SegmenterConfig,
    params: ParamStore<F>,
}

impl<F: Real> Segmenter<F> {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "segmenter", 0);
        let (w, cin, cout) = (config.width, 3 * FOLD * FOLD, FOLD * FOLD);
        let mut params = ParamStore::new();
        nn::init_conv(&mut params, "enc1a", 3, cin, w, 1.0, &mut r);
        nn::init_conv(&mut params, "enc1b", 3, w, w, 1.0, &mut r);
        nn::init_conv(&mut params, "enc2a", 3, w, 2 * w, 1.0, &mut r);
        nn::init_conv(&mut params, "enc2b", 3, 2 * w, 2 * w, 1.0, &mut r);
        nn::init_conv(&mut params, "dec", 3, 3 * w, w, 1.0, &mut r);
        nn::init_conv(&mut params, "head", 1, w, cout, 0.1, &mut r);
        Ok(Segmenter { config, params })
    }

    pub fn from_params(config: SegmenterConfig, params: ParamStore<F>) -> Result<Self> {
        let reference = Segmenter::<F>::new(config, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "segmenter parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format(
                "segmenter parameter set does not match".into(),
            ));
        }
        Ok(Segmenter { config, params })
    }

    pub fn config(&self) -> SegmenterConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    fn inputs(&self, tape: &mut Tape<F>, images: &[&Image]) -> Result<Var> {
        let spec = LatentSpec::new(FOLD)?;
        let size = self.config.image_size;
        let mut data = Vec::new();
        for img in images {
            if img.height() != size || img.width() != size {
                return Err(Error::dim(
                    "segmenter input",
                    &[size, size],
                    &[img.height(), img.width()],
                ));
            }
            data.extend_from_slice(codec::encode::<F>(img, spec)?.data());
        }
        let g = self.config.grid();
        tape.constant_from(&[images.len() * g * g, 3 * FOLD * FOLD], data)
    }

    /// Logits `[B·g·g × 4]` for a batch of images.
    pub fn forward(&self, tape: &mut Tape<F>, images: &[&Image]) -> Result<Var> {
        let p = &self.params;
        let g = self.config.grid();
        let x = self.inputs(tape, images)?;
        let conv = |tape: &mut Tape<F>, name: &str, x: Var, side: usize| -> Result<Var> {
            let y = nn::conv(tape, p, name, x, side, side)?;
            Ok(tape.gelu(y))
        };
        let a = conv(tape, "enc1a", x, g)?;
        let skip = conv(tape, "enc1b", a, g)?;
        let down = tape.avg_pool2(skip, g, g)?;
        let b = conv(tape, "enc2a", down, g / 2)?;
        let b = conv(tape, "enc2b", b, g / 2)?;
        let up = tape.upsample2(b, g / 2, g / 2)?;
        let cat = tape.concat_cols(&[up, skip])?;
        let d = conv(tape, "dec", cat, g)?;
        nn::conv(tape, p, "head", d, g, g)
    }

    /// Per-pixel anomaly logits in row-major pixel order, one vector per image.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut tape = Tape::new();
            let logits = self.forward(&mut tape, chunk)?;
            let g = self.config.grid();
            for cells in tape.value(logits).chunks(g * g * FOLD * FOLD) {
                out.push(unfold(cells, g).into_iter().map(Real::as_f64).collect());
            }
        }
        Ok(out)
    }
}

/// Cell-major `[g·g × 4]` logits to row-major pixels.
fn unfold<T: Copy>(cells: &[T], g: usize) -> Vec<T> {
    let side = g * FOLD;
    let mut out = Vec::with_capacity(cells.len());
    for y in 0..side {
        for x in 0..side {
            let cell = (y / FOLD) * g + x / FOLD;
            out.push(cells[cell * FOLD * FOLD + (y % FOLD) * FOLD + x % FOLD]);
        }
    }
    out
}

/// Row-major mask to the cell-major layout of the logits.
fn fold_mask<F: Real>(mask: &Mask, g: usize) -> Vec<F> {
    let mut out = vec![F::zero(); g * g * FOLD * FOLD];
    for (i, v) in out.iter_mut().enumerate() {
        let (cell, sub) = (i / (FOLD * FOLD), i % (FOLD * FOLD));
        let y = (cell / g) * FOLD + sub / FOLD;
        let x = (cell % g) * FOLD + sub % FOLD;
        if mask.get(y, x) {
            *v = F::one();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmenterTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

/// Trains a fresh segmenter with per-pixel binary cross-entropy on batches
/// drawn with replacement.
pub fn train_segmenter(
    config: SegmenterConfig,
    training: SegmenterTraining,
    examples: &[SegExample],
    seed: u64,
) -> Result<(Segmenter<f32>, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::Validation("segmenter training set is empty".into()));
    }
    let mut model = Segmenter::<f32>::new(config, rng::stream_seed(seed, "segmenter-init", 0))?;
    model.params.set_trainable(true);
    let mut opt = AdamW::new(
        AdamWConfig::new(training.learning_rate, training.weight_decay),
        &model.params,
    );
    let g = config.grid();
    let mut losses = Vec::with_capacity(training.steps);
    for step in 0..training.steps {
        let mut r = rng::stream(seed, "segmenter-batch", step as u64);
        let batch: Vec<&SegExample> = (0..training.batch_size.max(1))
            .map(|_| &examples[r.random_range(0..examples.len())])
            .collect();
        let images: Vec<&Image> = batch.iter().map(|e| &e.image).collect();
        let targets: Vec<f32> = batch
            .iter()
            .flat_map(|e| fold_mask::<f32>(&e.mask, g))
            .collect();
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &images)?;
        let loss = tape.bce_with_logits(logits, &targets)?;
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Numerical {
                what: "segmenter loss".into(),
                step,
            });
        }
        let grads = tape.backward(loss)?.named();
        opt.step(&mut model.params, &grads)?;
        losses.push(value);
    }
    model.params.set_trainable(false);
    Ok((model, losses))
}
