//! Finite-difference suites for the two gradients the method relies on: the
//! guidance energy with respect to `e_g`, and the conditioned
//! noise-prediction loss with respect to the adapter weights.

use std::time::Instant;

use rand::Rng;

use crate::adapter::{AdapterState, DropEvent};
use crate::crossmodal::{energy, energy_and_gradient, mean_anomaly_attention, Vlm, VlmConfig};
use crate::data::{gen_normal, reference_caption, DefectKind, Mask, TextureKind, TokenSpan, Vocab};
use crate::diffusion::{
    evaluate_loss, training_loss, Denoiser, DenoiserConfig, DiffusionSchedule, TrainItem,
};
use crate::error::Result;
use crate::rng;
use crate::tensor::{finite_diff_grad, relative_error, Tape, Tensor};

pub const ENERGY_TOLERANCE: f64 = 1e-5;
pub const ADAPTER_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

/// Outcome of one suite: the relative error of every case.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub errors: Vec<f64>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn worst(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.errors.is_empty() && self.errors.iter().all(|e| *e < self.tolerance)
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} cases, worst relative error {:.3e} (tolerance {:.0e}), {:.1}s",
            self.name,
            self.errors.len(),
            self.worst(),
            self.tolerance,
            self.seconds
        )
    }
}

/// `∇_{e_g} E` through the frozen VLM, on seeded VLMs, images, keywords,
/// masks and starting points.
pub fn energy_case(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gradcheck-energy", 0);
    let config = VlmConfig::default();
    let vlm = Vlm::<f64>::new(config, rng::stream_seed(seed, "gradcheck-vlm", 0))?;
    let texture = TextureKind::ALL[r.random_range(0..TextureKind::ALL.len())];
    let image = gen_normal(texture, r.random(), config.image_size)?;
    let kind = DefectKind::ALL[r.random_range(0..DefectKind::ALL.len())];
    let vocab = Vocab::new();
    let ids = vocab.tokenize(&reference_caption(kind.name()))?;
    let span = TokenSpan::new(vocab.prefix_len(), ids.len())?;
    let inputs = vlm.embed_inputs(&image, &ids)?;
    let side = config.image_size / config.patch;
    let mask = random_mask(side, &mut r);
    let start = vlm.zero_guidance();
    let guidance = Tensor::randn(start.shape(), 0.02, &mut r);
    let (_, analytic) = energy_and_gradient(&vlm, &inputs, &guidance, span, &mask)?;
    let f = |g: &Tensor<f64>| {
        let a = vlm.attention_map(&inputs, g).expect("attention map");
        energy(
            &mean_anomaly_attention(&a, span).expect("mean attention"),
            &mask,
        )
        .expect("energy")
    };
    let numeric = finite_diff_grad(f, &guidance, STEP);
    Ok(relative_error(analytic.data(), numeric.data()))
}

/// A mask with a random rectangle of patches, never empty or full.
fn random_mask<R: Rng + ?Sized>(side: usize, r: &mut R) -> Mask {
    let h = r.random_range(1..side);
    let w = r.random_range(1..side);
    let y0 = r.random_range(0..=side - h);
    let x0 = r.random_range(0..=side - w);
    let mut m = Mask::empty(side, side);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            m.set(y, x, true);
        }
    }
    m
}

fn small_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        grid: 4,
        channels: 12,
        base_width: 8,
        mid_width: 12,
        text_width: 8,
        time_width: 8,
        steps: 50,
    }
}

/// Adapter-weight gradient of the conditioned noise-prediction loss on a
/// small denoiser, with randomized weights so no path is trivially zero.
pub fn adapter_case(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gradcheck-adapter", 0);
    let config = small_denoiser();
    let mut denoiser =
        Denoiser::<f64>::new(config, rng::stream_seed(seed, "gradcheck-denoiser", 0))?;
    let names = denoiser.params().names();
    for name in names {
        let t = denoiser.params().get(&name)?;
        let noisy = t.zip_map(&Tensor::randn(t.shape(), 0.1, &mut r), |a, b| a + b)?;
        denoiser.params_mut().insert(name, noisy);
    }
    denoiser.params_mut().set_trainable(false);
    let feature_width = 6;
    let mut adapter =
        AdapterState::<f64>::new(&config.attention_blocks(), feature_width, 1.0, r.random())?;
    for name in adapter.params().names() {
        let shape = adapter.params().get(&name)?.shape().to_vec();
        adapter
            .params_mut()
            .insert(name, Tensor::randn(&shape, 0.3, &mut r).trainable());
    }
    let schedule = DiffusionSchedule::new(config.steps, 1e-4, 0.02, 10)?;
    let batch: Vec<TrainItem<f64>> = (0..2)
        .map(|_| {
            Ok(TrainItem {
                latent: Tensor::randn(&[config.grid, config.grid, config.channels], 1.0, &mut r),
                timestep: r.random_range(1..=config.steps),
                noise: Tensor::randn(&[config.grid, config.grid, config.channels], 1.0, &mut r),
                text: Tensor::randn(&[3, config.text_width], 1.0, &mut r),
                feature: Some(Tensor::randn(&[4, feature_width], 1.0, &mut r)),
                drop: DropEvent::Keep,
            })
        })
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let (loss, _) = training_loss(&mut tape, &denoiser, Some(&adapter), &schedule, &batch)?;
    let grads = tape.backward(loss)?.named();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in adapter.params().names() {
        analytic.extend_from_slice(&grads[&name]);
        let x = adapter.params().get(&name)?.clone();
        let f = |v: &Tensor<f64>| {
            let mut probe = adapter.clone();
            probe.params_mut().insert(name.clone(), v.clone());
            evaluate_loss(&denoiser, Some(&probe), &schedule, &batch).expect("loss")
        };
        numeric.extend_from_slice(finite_diff_grad(f, &x, STEP).data());
    }
    Ok(relative_error(&analytic, &numeric))
}

fn run(
    name: &'static str,
    tolerance: f64,
    seeds: std::ops::Range<u64>,
    case: fn(u64) -> Result<f64>,
) -> Result<SuiteResult> {
    let start = Instant::now();
    let errors = seeds.map(case).collect::<Result<Vec<_>>>()?;
    Ok(SuiteResult {
        name,
        tolerance,
        errors,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Both suites over `cases` seeds each, starting at `first_seed`.
pub fn run_all(first_seed: u64, cases: u64) -> Result<Vec<SuiteResult>> {
    let seeds = first_seed..first_seed + cases;
    Ok(vec![
        run(
            "guidance energy",
            ENERGY_TOLERANCE,
            seeds.clone(),
            energy_case,
        )?,
        run("adapter loss", ADAPTER_TOLERANCE, seeds, adapter_case)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cases_pass() {
        assert!(energy_case(7).unwrap() < ENERGY_TOLERANCE);
        assert!(adapter_case(7).unwrap() < ADAPTER_TOLERANCE);
    }

    #[test]
    fn masks_are_proper_subsets() {
        let mut r = rng::stream(0, "test", 0);
        for _ in 0..50 {
            let m = random_mask(8, &mut r);
            assert!(!m.is_empty() && m.area() < 64);
        }
    }
}
