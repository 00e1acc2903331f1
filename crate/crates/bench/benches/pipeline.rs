use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use defectsynth::codec;
use defectsynth::crossmodal::{asea_optimize, AseaConfig};
use defectsynth::data::Split;
use defectsynth::diffusion::{sample, Conditioning, SampleJob};
use defectsynth::pipeline::{initial_noise, sampler_config};
use defectsynth::rng;
use defectsynth::tensor::{Tape, Tensor};
use defectsynth_bench::{fixture, guidance_inputs};

fn gemm(c: &mut Criterion) {
    let mut r = rng::stream(0, "bench", 0);
    let (m, k, n) = (256, 108, 64);
    let a = Tensor::<f32>::randn(&[m, k], 1.0, &mut r);
    let b = Tensor::<f32>::randn(&[k, n], 1.0, &mut r);
    c.bench_function("matmul 256x108x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(black_box(&a)), tape.constant(black_box(&b)));
            let p = tape.matmul(x, y).expect("matmul");
            tape.value(p)[0]
        })
    });
}

fn codec_roundtrip(c: &mut Criterion) {
    let f = fixture();
    let image = &f.dataset.samples[0].image;
    c.bench_function("codec roundtrip", |bench| {
        bench.iter(|| {
            let z = codec::encode::<f32>(black_box(image), f.frozen.latent).expect("encode");
            codec::decode(&z, f.frozen.latent).expect("decode")
        })
    });
}

fn guidance(c: &mut Criterion) {
    let f = fixture();
    let (inputs, span, mask) = guidance_inputs(&f);
    c.bench_function("guidance loop, 3 steps", |bench| {
        bench.iter(|| {
            asea_optimize(&f.frozen.vlm, &inputs, span, &mask, AseaConfig::default()).expect("asea")
        })
    });
}

fn denoiser_forward(c: &mut Criterion) {
    let f = fixture();
    let latents: Vec<Tensor<f32>> = f
        .dataset
        .split(Split::Train)
        .take(8)
        .map(|s| codec::encode(&s.image, f.frozen.latent).expect("encode"))
        .collect();
    let text = f
        .frozen
        .text_embedding(&f.dataset.samples[0].target_text)
        .expect("text");
    let cond: Vec<Conditioning<f32>> = latents
        .iter()
        .map(|_| Conditioning {
            text: text.clone(),
            feature: None,
        })
        .collect();
    let steps = vec![500; latents.len()];
    c.bench_function("denoiser forward, batch 8", |bench| {
        bench.iter(|| {
            f.denoiser
                .predict(&latents, &steps, &cond, None)
                .expect("predict")
        })
    });
}

fn ddim(c: &mut Criterion) {
    let f = fixture();
    let text = f
        .frozen
        .text_embedding(&f.dataset.samples[0].target_text)
        .expect("text");
    let sampler = sampler_config(&f.config);
    let mut group = c.benchmark_group("sampling");
    group.sample_size(10);
    group.bench_function("30-step guided DDIM, one image", |bench| {
        bench.iter_batched(
            || SampleJob {
                noise: initial_noise(&f.frozen, f.config.image_size, 1).expect("noise"),
                cond: Conditioning {
                    text: text.clone(),
                    feature: None,
                },
                known: None,
            },
            |job| sample(&f.denoiser, None, &f.frozen.schedule, &[job], &sampler).expect("sample"),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(
    benches,
    gemm,
    codec_roundtrip,
    guidance,
    denoiser_forward,
    ddim
);
criterion_main!(benches);
