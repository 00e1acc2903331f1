//! Frozen vision-language stack and attention-energy guidance.

mod asea;
mod vlm;

pub use asea::{
    asea_optimize, asea_optimize_from, concentration_ratio, energy, energy_and_gradient,
    energy_on_tape, mean_anomaly_attention, AseaConfig, AseaOutcome,
};
pub use vlm::{Embeddings, Vlm, VlmConfig, VlmPass};
