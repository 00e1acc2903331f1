use rand::Rng;

use super::generate::{generate, Generated, GenerationRequest};
use super::models::Frozen;
use crate::adapter::AdapterState;
use crate::crossmodal::AseaConfig;
use crate::data::{
    rasterize, target_caption, Dataset, DefectKind, DefectSpec, Mask, Sample, Split,
};
use crate::diffusion::{Denoiser, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::{crop_paste, LabeledImage};
use crate::rng;

/// One anomaly to synthesize: a normal training image, a fresh procedural
/// mask and a same-type reference prompt from the training anomalies.
#[derive(Clone, Debug)]
pub struct SynthesisItem<'a> {
    pub background: &'a Sample,
    pub reference: &'a Sample,
    pub kind: DefectKind,
    pub mask: Mask,
    pub noise_seed: u64,
}

impl SynthesisItem<'_> {
    pub fn request(&self) -> Result<GenerationRequest> {
        let reference_text = self.reference.reference_text.clone().ok_or_else(|| {
            Error::Validation(format!(
                "sample {} has no reference caption",
                self.reference.id
            ))
        })?;
        Ok(GenerationRequest {
            target_caption: target_caption(self.background.texture, Some(self.kind.name())),
            reference: Some((self.reference.image.clone(), reference_text)),
            mask: self.mask.clone(),
            background: Some(self.background.image.clone()),
            noise_seed: self.noise_seed,
        })
    }

    pub fn origins(&self) -> Vec<usize> {
        vec![self.background.id, self.reference.id]
    }
}

/// Deterministic plan of `count` synthesis items drawn from the training
/// split only. Defect kinds cycle; everything else is drawn from `seed`.
pub fn plan_synthesis(
    dataset: &Dataset,
    count: usize,
    seed: u64,
) -> Result<Vec<SynthesisItem<'_>>> {
    let normals: Vec<&Sample> = dataset
        .split(Split::Train)
        .filter(|s| !s.is_anomalous())
        .collect();
    if normals.is_empty() {
        return Err(Error::Validation(
            "no normal training images to synthesize on".into(),
        ));
    }
    let kinds: Vec<DefectKind> = DefectKind::ALL
        .into_iter()
        .filter(|k| dataset.split(Split::Train).any(|s| s.defect == Some(*k)))
        .collect();
    if kinds.is_empty() {
        return Err(Error::Validation(
            "no anomalous training images to use as references".into(),
        ));
    }
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, "synthesis-plan", i as u64);
            let kind = kinds[i % kinds.len()];
            let background = normals[r.random_range(0..normals.len())];
            let pool: Vec<&Sample> = dataset
                .split(Split::Train)
                .filter(|s| s.defect == Some(kind))
                .collect();
            let reference = pool[r.random_range(0..pool.len())];
            let size = background.image.height();
            let spec = DefectSpec::random(kind, size, &mut r);
            let mask = rasterize(&spec, size, background.image.width())?;
            Ok(SynthesisItem {
                background,
                reference,
                kind,
                mask,
                noise_seed: rng::stream_seed(seed, "synthesis-noise", i as u64),
            })
        })
        .collect()
}

/// Generates every planned item.
pub fn synthesize(
    frozen: &Frozen<f32>,
    denoiser: &Denoiser<f32>,
    adapter: Option<&AdapterState<f32>>,
    sampler: &SamplerConfig,
    asea: AseaConfig,
    plan: &[SynthesisItem],
) -> Result<Vec<Generated>> {
    let requests = plan
        .iter()
        .map(SynthesisItem::request)
        .collect::<Result<Vec<_>>>()?;
    generate(frozen, denoiser, adapter, sampler, asea, &requests)
}

/// Synthesized images paired with their masks for the downstream protocol.
pub fn labeled_synthesis(plan: &[SynthesisItem], generated: &[Generated]) -> Vec<LabeledImage> {
    plan.iter()
        .zip(generated)
        .map(|(item, g)| LabeledImage {
            origins: item.origins(),
            image: g.image.clamped(),
            mask: item.mask.clone(),
        })
        .collect()
}

/// The crop-paste control for the same plan: identical backgrounds and
/// masks, with the mask filled from a shifted crop of the background.
pub fn labeled_crop_paste(plan: &[SynthesisItem], seed: u64) -> Result<Vec<LabeledImage>> {
    plan.iter()
        .enumerate()
        .map(|(i, item)| {
            let mut r = rng::stream(seed, "crop-paste", i as u64);
            Ok(LabeledImage {
                origins: item.origins(),
                image: crop_paste(&item.background.image, &item.mask, &mut r)?,
                mask: item.mask.clone(),
            })
        })
        .collect()
}

/// Images of one split with their ground-truth masks.
pub fn labeled_split(dataset: &Dataset, split: Split, normals_only: bool) -> Vec<LabeledImage> {
    dataset
        .split(split)
        .filter(|s| !normals_only || !s.is_anomalous())
        .map(|s| LabeledImage {
            origins: vec![s.id],
            image: s.image.clone(),
            mask: s.mask.clone(),
        })
        .collect()
}
