use std::collections::BTreeMap;

use crate::codec::{downsample_mask, LatentSpec};
use crate::config::RunConfig;
use crate::crossmodal::{asea_optimize_from, AseaConfig, AseaOutcome, Vlm, VlmConfig};
use crate::data::{DatasetConfig, Image, Mask, TokenSpan, Vocab};
use crate::diffusion::{DenoiserConfig, DiffusionSchedule, SamplerConfig, TextEncoder};
use crate::error::Result;
use crate::rng;
use crate::tensor::{Real, Tensor};

pub fn denoiser_config(c: &RunConfig) -> DenoiserConfig {
    DenoiserConfig {
        grid: c.image_size / c.latent_factor,
        channels: 3 * c.latent_factor * c.latent_factor,
        base_width: c.base_width,
        mid_width: c.mid_width,
        text_width: c.text_width,
        time_width: c.time_width,
        steps: c.timesteps,
    }
}

pub fn dataset_config(c: &RunConfig) -> DatasetConfig {
    DatasetConfig {
        image_size: c.image_size,
        normals_per_texture: c.normals_per_texture,
        anomalies_per_category: c.anomalies_per_category,
        train_fraction: c.train_fraction,
        pairing: c.reference_pairing,
        ..DatasetConfig::default()
    }
}

pub fn vlm_config(c: &RunConfig) -> VlmConfig {
    VlmConfig {
        image_size: c.image_size,
        patch: c.vlm_patch,
        width: c.vlm_width,
        heads: c.vlm_heads,
        layers: c.vlm_layers,
        feature_width: c.feature_width,
        max_len: 8,
        visual_scale: c.vlm_visual_scale,
        attention_gain: c.vlm_attention_gain,
    }
}

pub fn asea_config(c: &RunConfig) -> AseaConfig {
    AseaConfig {
        alpha: c.asea_alpha,
        steps: c.asea_steps,
    }
}

pub fn sampler_config(c: &RunConfig) -> SamplerConfig {
    SamplerConfig {
        guidance_scale: c.guidance_scale,
        mode: c.guidance_mode,
        clamp: c.clamp_x0,
    }
}

/// The seeded components that never train: vocabulary, text encoder, VLM,
/// latent codec and noise schedule.
#[derive(Clone, Debug)]
pub struct Frozen<F> {
    pub vocab: Vocab,
    pub text: TextEncoder<F>,
    pub vlm: Vlm<F>,
    pub latent: LatentSpec,
    pub schedule: DiffusionSchedule,
}

/// Conditioning inputs `(C, C′)` of one example together with the
/// guidance trace that produced `C′`.
#[derive(Clone, Debug)]
pub struct PreparedCondition<F> {
    pub text: Tensor<F>,
    pub feature: Tensor<F>,
    pub guidance: AseaOutcome<F>,
}

impl<F: Real> Frozen<F> {
    pub fn new(c: &RunConfig) -> Result<Self> {
        let vocab = Vocab::new();
        let text = TextEncoder::new(
            vocab.len(),
            c.text_width,
            8,
            rng::stream_seed(c.seed, "text_encoder", 0),
        )?;
        let vlm = Vlm::new(vlm_config(c), rng::stream_seed(c.seed, "vlm", 0))?;
        Ok(Frozen {
            vocab,
            text,
            vlm,
            latent: LatentSpec::new(c.latent_factor)?,
            schedule: DiffusionSchedule::new(c.timesteps, c.beta_min, c.beta_max, c.ddim_steps)?,
        })
    }

    /// Text embedding `C` of a target caption.
    pub fn text_embedding(&self, caption: &str) -> Result<Tensor<F>> {
        self.text.encode(&self.vocab.tokenize(caption)?)
    }

    /// Embeddings of every distinct caption, keyed by caption.
    pub fn text_cache<'a>(
        &self,
        captions: impl IntoIterator<Item = &'a str>,
    ) -> Result<BTreeMap<String, Tensor<F>>> {
        let mut out = BTreeMap::new();
        for c in captions {
            if !out.contains_key(c) {
                out.insert(c.to_string(), self.text_embedding(c)?);
            }
        }
        Ok(out)
    }

    /// Runs the guidance loop on a reference prompt for a pixel mask and
    /// returns the guided feature `C′`. `start` overrides the zero start.
    pub fn guided_feature(
        &self,
        reference: &Image,
        reference_caption: &str,
        mask: &Mask,
        asea: AseaConfig,
        start: Option<Tensor<F>>,
    ) -> Result<(Tensor<F>, AseaOutcome<F>)> {
        let ids = self.vocab.tokenize(reference_caption)?;
        let span = TokenSpan::new(self.vocab.prefix_len(), ids.len())?;
        let inputs = self.vlm.embed_inputs(reference, &ids)?;
        let patch_mask = downsample_mask(mask, self.vlm.config().patch_spec())?;
        let start = start.unwrap_or_else(|| self.vlm.zero_guidance());
        let outcome = asea_optimize_from(&self.vlm, &inputs, span, &patch_mask, asea, start)?;
        let feature = self.vlm.cross_modal_feature(&inputs, &outcome.guidance)?;
        Ok((feature, outcome))
    }

    pub fn prepare(
        &self,
        target_caption: &str,
        reference: &Image,
        reference_caption: &str,
        mask: &Mask,
        asea: AseaConfig,
    ) -> Result<PreparedCondition<F>> {
        let (feature, guidance) =
            self.guided_feature(reference, reference_caption, mask, asea, None)?;
        Ok(PreparedCondition {
            text: self.text_embedding(target_caption)?,
            feature,
            guidance,
        })
    }
}
