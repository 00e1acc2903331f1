use rayon::prelude::*;

use super::models::Frozen;
use crate::adapter::AdapterState;
use crate::codec::{self, downsample_mask};
use crate::crossmodal::AseaConfig;
use crate::data::{Image, Mask};
use crate::diffusion::{sample, Conditioning, Denoiser, KnownRegion, SampleJob, SamplerConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Trajectories sampled together; bounds the size of one tape.
const SAMPLE_CHUNK: usize = 32;

/// One image to synthesize.
#[derive(Clone, Debug)]
pub struct GenerationRequest {
    pub target_caption: String,
    /// Reference prompt `(I_a, T_a)`; `None` conditions on text alone.
    pub reference: Option<(Image, String)>,
    /// Region the anomaly should occupy.
    pub mask: Mask,
    /// Normal image kept outside the latent cells the mask touches;
    /// `None` generates the whole image.
    pub background: Option<Image>,
    /// Seed of the starting noise.
    pub noise_seed: u64,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub image: Image,
    pub latent: Tensor<f32>,
    /// Guidance energies; empty when no reference was used.
    pub energies: Vec<f64>,
}

/// Starting noise `z_T` of a request.
pub fn initial_noise(frozen: &Frozen<f32>, image_size: usize, seed: u64) -> Result<Tensor<f32>> {
    let (h, w) = frozen.latent.grid(image_size, image_size)?;
    let mut r = rng::stream(seed, "sample-noise", 0);
    Ok(Tensor::randn(
        &[h, w, frozen.latent.channels()],
        1.0,
        &mut r,
    ))
}

/// Guided DDIM generation. With an adapter, requests that carry a reference
/// run the guidance loop on its prompt and the request mask first.
pub fn generate(
    frozen: &Frozen<f32>,
    denoiser: &Denoiser<f32>,
    adapter: Option<&AdapterState<f32>>,
    sampler: &SamplerConfig,
    asea: AseaConfig,
    requests: &[GenerationRequest],
) -> Result<Vec<Generated>> {
    let size = denoiser.config().grid * frozen.latent.factor;
    let prepared = requests
        .par_iter()
        .map(|req| {
            let text = frozen.text_embedding(&req.target_caption)?;
            let (feature, energies) = match (&req.reference, adapter) {
                (Some((image, caption)), Some(_)) => {
                    let (f, g) = frozen.guided_feature(image, caption, &req.mask, asea, None)?;
                    (Some(f), g.energies)
                }
                _ => (None, Vec::new()),
            };
            let noise = initial_noise(frozen, size, req.noise_seed)?;
            let known = match &req.background {
                Some(image) => Some(KnownRegion {
                    latent: codec::encode(image, frozen.latent)?,
                    region: downsample_mask(&req.mask, frozen.latent)?.data().to_vec(),
                }),
                None => None,
            };
            let job = SampleJob {
                noise,
                cond: Conditioning { text, feature },
                known,
            };
            Ok((job, energies))
        })
        .collect::<Result<Vec<_>>>()?;
    let (jobs, energies): (Vec<_>, Vec<_>) = prepared.into_iter().unzip();
    let mut latents = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(SAMPLE_CHUNK) {
        latents.extend(sample(denoiser, adapter, &frozen.schedule, chunk, sampler)?);
    }
    latents
        .into_iter()
        .zip(energies)
        .map(|(latent, energies)| {
            if !latent.is_finite() {
                return Err(Error::Numerical {
                    what: "generated latent".into(),
                    step: 0,
                });
            }
            Ok(Generated {
                image: codec::decode(&latent, frozen.latent)?,
                latent,
                energies,
            })
        })
        .collect()
}
