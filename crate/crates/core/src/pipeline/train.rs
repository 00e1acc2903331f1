use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use super::models::{asea_config, denoiser_config, Frozen};
use crate::adapter::{AdamW, AdamWConfig, AdapterState, DropEvent};
use crate::codec;
use crate::config::RunConfig;
use crate::crossmodal::AseaConfig;
use crate::data::{Dataset, Sample, Split};
use crate::diffusion::{training_loss, Denoiser, TrainItem};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// One row of a training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Mean guidance energy before and after the loop; NaN when unused.
    pub energy_initial: f64,
    pub energy_final: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "step\tloss\tE_0\tE_Tg\twall_seconds";

impl StepLog {
    pub fn row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.3}",
            self.step, self.loss, self.energy_initial, self.energy_final, self.seconds
        )
    }
}

/// Trailing mean over `window` entries, one value per step.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

fn random_noise<R: Rng>(shape: &[usize], r: &mut R) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, r)
}

/// Draws timesteps, noise and dropout events for a batch.
#[allow(clippy::too_many_arguments)]
fn draw_items(
    frozen: &Frozen<f32>,
    samples: &[&Sample],
    text: &BTreeMap<String, Tensor<f32>>,
    features: Option<&[Tensor<f32>]>,
    dropout: f64,
    seed: u64,
    component: &str,
    step: usize,
) -> Result<Vec<TrainItem<f32>>> {
    let mut r = rng::stream(seed, component, step as u64);
    let steps = frozen.schedule.steps();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let latent = codec::encode::<f32>(&s.image, frozen.latent)?;
            let noise = random_noise(latent.shape(), &mut r);
            Ok(TrainItem {
                timestep: r.random_range(1..=steps),
                drop: DropEvent::draw(&mut r, dropout)?,
                text: text[&s.target_text].clone(),
                feature: features.map(|f| f[i].clone()),
                latent,
                noise,
            })
        })
        .collect()
}

/// Base-model pre-training: all denoiser weights learn the noise-prediction
/// objective on text conditioning alone. Returns the weight average.
pub fn pretrain(
    config: &RunConfig,
    frozen: &Frozen<f32>,
    dataset: &Dataset,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(Denoiser<f32>, Vec<StepLog>)> {
    let mut denoiser = Denoiser::<f32>::new(
        denoiser_config(config),
        rng::stream_seed(config.seed, "denoiser", 0),
    )?;
    denoiser.params_mut().set_trainable(true);
    let train: Vec<&Sample> = dataset.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let text = frozen.text_cache(train.iter().map(|s| s.target_text.as_str()))?;
    let mut opt = AdamW::new(
        AdamWConfig::new(config.pretrain_learning_rate, config.weight_decay),
        denoiser.params(),
    );
    let mut average = denoiser.params().clone();
    let start = Instant::now();
    let mut logs = Vec::with_capacity(config.pretrain_steps);
    for step in 0..config.pretrain_steps {
        let progress = step as f64 / config.pretrain_steps as f64;
        opt.set_lr(
            config.pretrain_learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        );
        let mut r = rng::stream(config.seed, "pretrain-batch", step as u64);
        let batch: Vec<&Sample> = (0..config.batch_size)
            .map(|_| train[r.random_range(0..train.len())])
            .collect();
        let items = draw_items(
            frozen,
            &batch,
            &text,
            None,
            config.dropout,
            config.seed,
            "pretrain-draw",
            step,
        )?;
        let mut tape = Tape::new();
        let (loss, _) = training_loss(&mut tape, &denoiser, None, &frozen.schedule, &items)?;
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Numerical {
                what: "pre-training loss".into(),
                step,
            });
        }
        let grads = tape.backward(loss)?.named();
        opt.step(denoiser.params_mut(), &grads)?;
        // Short warm-up so early iterates do not dominate the average.
        let decay = config
            .pretrain_ema
            .min((1.0 + step as f64) / (10.0 + step as f64));
        blend_average(&mut average, denoiser.params(), decay);
        let log = StepLog {
            step,
            loss: value,
            energy_initial: f64::NAN,
            energy_final: f64::NAN,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_step(&log);
        logs.push(log);
    }
    average.set_trainable(false);
    Ok((Denoiser::from_params(*denoiser.config(), average)?, logs))
}

/// `average ← decay·average + (1 − decay)·current`.
fn blend_average(average: &mut ParamStore<f32>, current: &ParamStore<f32>, decay: f64) {
    let (keep, take) = (decay as f32, (1.0 - decay) as f32);
    for ((_, a), (_, c)) in average.iter_mut().zip(current.iter()) {
        for (x, &y) in a.data_mut().iter_mut().zip(c.data()) {
            *x = keep * *x + take * y;
        }
    }
}

/// A target image with the reference prompt used to guide it.
#[derive(Clone, Copy, Debug)]
pub struct AdapterExample<'a> {
    pub target: &'a Sample,
    pub reference: &'a Sample,
}

/// Guidance variables carried across iterations when the persistent
/// variant is enabled, keyed by target id.
pub type GuidanceMemory = HashMap<usize, Tensor<f32>>;

/// Everything one adapter update needs besides the trainable state.
pub struct AdapterStepContext<'a> {
    pub frozen: &'a Frozen<f32>,
    pub denoiser: &'a Denoiser<f32>,
    pub text: &'a BTreeMap<String, Tensor<f32>>,
    pub asea: AseaConfig,
    pub dropout: f64,
    pub seed: u64,
}

/// One iteration of adapter training: per example, reset the guidance
/// variable, run the guidance loop on the reference prompt with the target
/// mask, emit `C′` (held constant), then update only the adapter weights on
/// the conditioned noise-prediction loss.
pub fn adapter_train_step(
    ctx: &AdapterStepContext,
    adapter: &mut AdapterState<f32>,
    opt: &mut AdamW,
    examples: &[AdapterExample],
    step: usize,
    memory: Option<&mut GuidanceMemory>,
) -> Result<StepLog> {
    let frozen = ctx.frozen;
    let starts: Vec<Option<Tensor<f32>>> = match &memory {
        Some(m) => examples
            .iter()
            .map(|e| m.get(&e.target.id).cloned())
            .collect(),
        None => vec![None; examples.len()],
    };
    let guided = examples
        .par_iter()
        .zip(starts)
        .map(|(e, start)| {
            let reference_text = e.reference.reference_text.as_deref().ok_or_else(|| {
                Error::Validation(format!(
                    "sample {} has no reference caption",
                    e.reference.id
                ))
            })?;
            frozen.guided_feature(
                &e.reference.image,
                reference_text,
                &e.target.mask,
                ctx.asea,
                start,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(m) = memory {
        for (e, (_, g)) in examples.iter().zip(&guided) {
            m.insert(e.target.id, g.guidance.clone());
        }
    }
    let n = guided.len() as f64;
    let energy_initial = guided.iter().map(|(_, g)| g.energies[0]).sum::<f64>() / n;
    let energy_final = guided
        .iter()
        .map(|(_, g)| *g.energies.last().expect("trace"))
        .sum::<f64>()
        / n;
    let features: Vec<Tensor<f32>> = guided.into_iter().map(|(f, _)| f).collect();
    let targets: Vec<&Sample> = examples.iter().map(|e| e.target).collect();
    let items = draw_items(
        frozen,
        &targets,
        ctx.text,
        Some(&features),
        ctx.dropout,
        ctx.seed,
        "adapter-draw",
        step,
    )?;
    let mut tape = Tape::new();
    let (loss, _) = training_loss(
        &mut tape,
        ctx.denoiser,
        Some(adapter),
        &frozen.schedule,
        &items,
    )?;
    let value = tape.scalar(loss) as f64;
    if !value.is_finite() {
        return Err(Error::Numerical {
            what: "adapter loss".into(),
            step,
        });
    }
    let grads = tape.backward(loss)?.named();
    opt.step(adapter.params_mut(), &grads)?;
    Ok(StepLog {
        step,
        loss: value,
        energy_initial,
        energy_final,
        seconds: 0.0,
    })
}

/// Adapter training over the anomalous training samples. The denoiser and
/// VLM hashes are checked after every step.
pub fn train_adapter(
    config: &RunConfig,
    frozen: &Frozen<f32>,
    denoiser: &Denoiser<f32>,
    dataset: &Dataset,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(AdapterState<f32>, Vec<StepLog>)> {
    let blocks = denoiser.config().attention_blocks();
    let mut adapter = AdapterState::<f32>::new(
        &blocks,
        config.feature_width,
        config.gamma,
        rng::stream_seed(config.seed, "adapter", 0),
    )?;
    let targets: Vec<&Sample> = dataset
        .split(Split::Train)
        .filter(|s| s.is_anomalous())
        .collect();
    if targets.is_empty() {
        return Err(Error::Validation("no anomalous training samples".into()));
    }
    let examples: Vec<AdapterExample> = targets
        .iter()
        .map(|t| {
            let reference = t
                .reference_id
                .and_then(|id| dataset.get(id))
                .ok_or_else(|| Error::Validation(format!("sample {} has no reference", t.id)))?;
            Ok(AdapterExample {
                target: t,
                reference,
            })
        })
        .collect::<Result<_>>()?;
    let text = frozen.text_cache(targets.iter().map(|s| s.target_text.as_str()))?;
    let mut opt = AdamW::new(
        AdamWConfig::new(config.learning_rate, config.weight_decay),
        adapter.params(),
    );
    let denoiser_hash = denoiser.params().hash();
    let vlm_hash = frozen.vlm.params().hash();
    if denoiser.params().trainable_names().len() + frozen.vlm.params().trainable_names().len() > 0 {
        return Err(Error::Frozen(
            "denoiser or VLM parameters are marked trainable".into(),
        ));
    }
    let ctx = AdapterStepContext {
        frozen,
        denoiser,
        text: &text,
        asea: asea_config(config),
        dropout: config.dropout,
        seed: config.seed,
    };
    let mut memory = config.persistent_guidance.then(GuidanceMemory::new);
    let start = Instant::now();
    let mut logs = Vec::with_capacity(config.adapter_steps);
    for step in 0..config.adapter_steps {
        let mut r = rng::stream(config.seed, "adapter-batch", step as u64);
        let batch: Vec<AdapterExample> = (0..config.batch_size)
            .map(|_| examples[r.random_range(0..examples.len())])
            .collect();
        let mut log =
            adapter_train_step(&ctx, &mut adapter, &mut opt, &batch, step, memory.as_mut())?;
        log.seconds = start.elapsed().as_secs_f64();
        if denoiser.params().hash() != denoiser_hash || frozen.vlm.params().hash() != vlm_hash {
            return Err(Error::Frozen(format!(
                "frozen parameters changed at step {step}"
            )));
        }
        on_step(&log);
        logs.push(log);
    }
    Ok((adapter, logs))
}
