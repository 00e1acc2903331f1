//! Shared fixtures for the benchmarks.

use defectsynth::config::RunConfig;
use defectsynth::crossmodal::Embeddings;
use defectsynth::data::{build_dataset, reference_caption, Dataset, DefectKind, Mask, TokenSpan};
use defectsynth::diffusion::Denoiser;
use defectsynth::pipeline::{dataset_config, denoiser_config, Frozen};
use defectsynth::rng;

pub struct Fixture {
    pub config: RunConfig,
    pub frozen: Frozen<f32>,
    pub denoiser: Denoiser<f32>,
    pub dataset: Dataset,
}

/// Default-sized models with untrained weights and a small dataset.
pub fn fixture() -> Fixture {
    let config = RunConfig {
        normals_per_texture: 3,
        anomalies_per_category: 3,
        ..RunConfig::default()
    };
    let frozen = Frozen::new(&config).expect("frozen stack");
    let denoiser = Denoiser::new(
        denoiser_config(&config),
        rng::stream_seed(config.seed, "denoiser", 0),
    )
    .expect("denoiser");
    let dataset = build_dataset(&dataset_config(&config), config.seed).expect("dataset");
    Fixture {
        config,
        frozen,
        denoiser,
        dataset,
    }
}

/// VLM inputs for a reference prompt, its keyword span and a centre mask.
pub fn guidance_inputs(f: &Fixture) -> (Embeddings<f32>, TokenSpan, Mask) {
    let sample = &f.dataset.samples[0];
    let ids = f
        .frozen
        .vocab
        .tokenize(&reference_caption(DefectKind::ALL[0].name()))
        .expect("tokens");
    let span = TokenSpan::new(f.frozen.vocab.prefix_len(), ids.len()).expect("span");
    let inputs = f
        .frozen
        .vlm
        .embed_inputs(&sample.image, &ids)
        .expect("embeddings");
    let side = f.config.image_size / f.config.vlm_patch;
    let mut mask = Mask::empty(side, side);
    for y in side / 4..side / 2 {
        for x in side / 4..side / 2 {
            mask.set(y, x, true);
        }
    }
    (inputs, span, mask)
}
