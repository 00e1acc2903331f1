use super::schedule::{q_sample, DiffusionSchedule};
use super::unet::{stack_latents, Conditioning, Denoiser, DenoiserOutput};
use crate::adapter::{AdapterState, DropEvent};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// One term of the noise-prediction objective.
#[derive(Clone, Debug)]
pub struct TrainItem<F> {
    pub latent: Tensor<F>,
    pub timestep: usize,
    pub noise: Tensor<F>,
    pub text: Tensor<F>,
    pub feature: Option<Tensor<F>>,
    pub drop: DropEvent,
}

impl<F: Real> TrainItem<F> {
    /// Conditioning after classifier-free dropout: dropped inputs become zeros.
    pub fn conditioning(&self) -> Conditioning<F> {
        Conditioning {
            text: if self.drop.drops_text() {
                Tensor::zeros(self.text.shape())
            } else {
                self.text.clone()
            },
            feature: self.feature.as_ref().map(|f| {
                if self.drop.drops_feature() {
                    Tensor::zeros(f.shape())
                } else {
                    f.clone()
                }
            }),
        }
    }
}

/// Records `mean ‖ε − ε_θ(z_t, t, C, C′)‖²` over the batch on `tape`.
pub fn training_loss<F: Real>(
    tape: &mut Tape<F>,
    denoiser: &Denoiser<F>,
    adapter: Option<&AdapterState<F>>,
    schedule: &DiffusionSchedule,
    batch: &[TrainItem<F>],
) -> Result<(Var, DenoiserOutput)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let noisy = batch
        .iter()
        .map(|b| q_sample(&b.latent, b.timestep, &b.noise, schedule))
        .collect::<Result<Vec<_>>>()?;
    let z = stack_latents(tape, &noisy)?;
    let timesteps: Vec<usize> = batch.iter().map(|b| b.timestep).collect();
    let cond: Vec<Conditioning<F>> = batch.iter().map(TrainItem::conditioning).collect();
    let out = denoiser.forward(tape, z, &timesteps, &cond, adapter)?;
    let target: Vec<Tensor<F>> = batch.iter().map(|b| b.noise.clone()).collect();
    let eps = stack_latents(tape, &target)?;
    let diff = tape.sub(out.eps, eps)?;
    let sq = tape.square(diff);
    Ok((tape.mean_all(sq), out))
}

/// Scalar loss without recording gradients.
pub fn evaluate_loss<F: Real>(
    denoiser: &Denoiser<F>,
    adapter: Option<&AdapterState<F>>,
    schedule: &DiffusionSchedule,
    batch: &[TrainItem<F>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = training_loss(&mut tape, denoiser, adapter, schedule, batch)?;
    Ok(tape.scalar(loss).as_f64())
}
