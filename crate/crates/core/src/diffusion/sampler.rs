use super::schedule::{cfg_combine, ddim_step, DiffusionSchedule};
use super::unet::{Conditioning, Denoiser};
use crate::adapter::AdapterState;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// How classifier-free guidance treats the two conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    /// One scale between the jointly conditioned and fully unconditioned
    /// predictions.
    Joint,
    /// Guides text and cross-modal feature separately:
    /// `ε_∅ + s·(ε_C − ε_∅) + s·(ε_CC′ − ε_C)`.
    Separate,
}

impl GuidanceMode {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::Joint => "joint",
            GuidanceMode::Separate => "separate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(GuidanceMode::Joint),
            "separate" => Ok(GuidanceMode::Separate),
            _ => Err(Error::Config(format!("unknown guidance mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    pub mode: GuidanceMode,
    /// Clip for the predicted clean latent; `None` disables clipping.
    pub clamp: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            guidance_scale: 7.5,
            mode: GuidanceMode::Joint,
            clamp: None,
        }
    }
}

/// Latent to keep outside a region: after every step, positions outside
/// `region` are reset to the clean latent noised to the current timestep
/// with the trajectory's own starting noise.
#[derive(Clone, Debug)]
pub struct KnownRegion<F> {
    pub latent: Tensor<F>,
    /// Latent-grid mask, row-major over `[h, w]`; set cells are generated.
    pub region: Vec<bool>,
}

/// One trajectory: starting noise `z_T` and its conditioning.
#[derive(Clone, Debug)]
pub struct SampleJob<F> {
    pub noise: Tensor<F>,
    pub cond: Conditioning<F>,
    pub known: Option<KnownRegion<F>>,
}

fn check_known<F: Real>(job: &SampleJob<F>) -> Result<()> {
    if let Some(k) = &job.known {
        let shape = job.noise.shape();
        if k.latent.shape() != shape || shape.len() != 3 || k.region.len() != shape[0] * shape[1] {
            return Err(Error::dim("known region", shape, k.latent.shape()));
        }
    }
    Ok(())
}

/// Resets the positions outside the region to `√ᾱ_t·z₀ + √(1−ᾱ_t)·z_T`.
fn impose_known<F: Real>(
    z: &mut Tensor<F>,
    noise: &Tensor<F>,
    known: &KnownRegion<F>,
    alpha_bar: f64,
) {
    let channels = z.shape()[2];
    let (a, s) = (F::lit(alpha_bar.sqrt()), F::lit((1.0 - alpha_bar).sqrt()));
    let (z0, n) = (known.latent.data(), noise.data());
    for (cell, out) in z.data_mut().chunks_mut(channels).enumerate() {
        if !known.region[cell] {
            let o = cell * channels;
            for (c, v) in out.iter_mut().enumerate() {
                *v = a * z0[o + c] + s * n[o + c];
            }
        }
    }
}

fn null_of<F: Real>(c: &Conditioning<F>, keep_feature: bool) -> Conditioning<F> {
    Conditioning {
        text: Tensor::zeros(c.text.shape()),
        feature: c.feature.as_ref().map(|f| {
            if keep_feature {
                f.clone()
            } else {
                Tensor::zeros(f.shape())
            }
        }),
    }
}

fn text_only<F: Real>(c: &Conditioning<F>) -> Conditioning<F> {
    Conditioning {
        text: c.text.clone(),
        feature: c.feature.as_ref().map(|f| Tensor::zeros(f.shape())),
    }
}

/// Guided deterministic DDIM over the schedule's plan. All trajectories and
/// guidance branches share one batched denoiser call per step. Jobs with a
/// known region are inpainted: only the region is generated.
pub fn sample<F: Real>(
    denoiser: &Denoiser<F>,
    adapter: Option<&AdapterState<F>>,
    schedule: &DiffusionSchedule,
    jobs: &[SampleJob<F>],
    config: &SamplerConfig,
) -> Result<Vec<Tensor<F>>> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    for job in jobs {
        check_known(job)?;
    }
    let n = jobs.len();
    let mut cond: Vec<Conditioning<F>> = jobs.iter().map(|j| j.cond.clone()).collect();
    cond.extend(jobs.iter().map(|j| null_of(&j.cond, false)));
    if config.mode == GuidanceMode::Separate {
        cond.extend(jobs.iter().map(|j| text_only(&j.cond)));
    }
    let branches = cond.len() / n;
    let mut z: Vec<Tensor<F>> = jobs.iter().map(|j| j.noise.clone()).collect();
    let first = schedule.plan()[0];
    for (zi, job) in z.iter_mut().zip(jobs) {
        if let Some(k) = &job.known {
            impose_known(zi, &job.noise, k, schedule.alpha_bar(first));
        }
    }
    for &t in schedule.plan() {
        let t_prev = schedule.next_in_plan(t).unwrap_or(0);
        let mut batch = Vec::with_capacity(n * branches);
        for _ in 0..branches {
            batch.extend(z.iter().cloned());
        }
        let eps = denoiser.predict(&batch, &vec![t; batch.len()], &cond, adapter)?;
        for i in 0..n {
            let (full, null) = (&eps[i], &eps[n + i]);
            let guided = match config.mode {
                GuidanceMode::Joint => cfg_combine(full, null, config.guidance_scale)?,
                GuidanceMode::Separate => {
                    let text = &eps[2 * n + i];
                    let a = cfg_combine(text, null, config.guidance_scale)?;
                    let s = F::lit(config.guidance_scale);
                    a.zip_map(&full.zip_map(text, |f, c| f - c)?, |a, d| a + s * d)?
                }
            };
            let mut next = ddim_step(&z[i], &guided, t, t_prev, schedule, config.clamp)?;
            if let Some(k) = &jobs[i].known {
                impose_known(&mut next, &jobs[i].noise, k, schedule.alpha_bar(t_prev));
            }
            if !next.is_finite() {
                return Err(Error::Numerical {
                    what: "DDIM latent".into(),
                    step: t,
                });
            }
            z[i] = next;
        }
    }
    Ok(z)
}
