//! Noise schedule, denoiser, guided DDIM sampling and the noise-prediction loss.

mod loss;
mod sampler;
mod schedule;
mod text;
mod unet;

pub use loss::{evaluate_loss, training_loss, TrainItem};
pub use sampler::{sample, GuidanceMode, KnownRegion, SampleJob, SamplerConfig};
pub use schedule::{cfg_combine, ddim_step, ddim_update, q_sample, DiffusionSchedule};
pub use text::TextEncoder;
pub use unet::{
    stack_latents, Conditioning, Denoiser, DenoiserConfig, DenoiserOutput, ATTENTION_BLOCKS,
};
