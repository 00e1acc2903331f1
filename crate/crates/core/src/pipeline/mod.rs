//! Training and generation built from the model components.

mod generate;
mod models;
mod synth;
mod train;

pub use generate::{generate, initial_noise, Generated, GenerationRequest};
pub use models::{
    asea_config, dataset_config, denoiser_config, sampler_config, vlm_config, Frozen,
    PreparedCondition,
};
pub use synth::{
    labeled_crop_paste, labeled_split, labeled_synthesis, plan_synthesis, synthesize, SynthesisItem,
};
pub use train::{
    adapter_train_step, moving_average, pretrain, train_adapter, AdapterExample,
    AdapterStepContext, GuidanceMemory, StepLog, LOG_HEADER,
};
