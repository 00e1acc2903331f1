use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Linear-β noise schedule with a DDIM timestep plan.
///
/// Timesteps are 1-based; index 0 stands for the clean sample with ᾱ₀ = 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    plan: Vec<usize>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_min: f64, beta_max: f64, ddim_count: usize) -> Result<Self> {
        if ddim_count == 0 || steps < ddim_count {
            return Err(Error::Validation(format!(
                "need steps ({steps}) >= ddim count ({ddim_count}) >= 1"
            )));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) || steps < 2 {
            return Err(Error::Validation(format!(
                "need 0 < beta_min ({beta_min}) < beta_max ({beta_max}) < 1 and at least 2 steps"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        // t_k = floor(k·T/n) for k = n..1; spacing is at least one step.
        let plan = (1..=ddim_count)
            .rev()
            .map(|k| k * steps / ddim_count)
            .collect();
        Ok(DiffusionSchedule {
            betas,
            alpha_bars,
            plan,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Strictly decreasing DDIM timesteps, starting at T.
    pub fn plan(&self) -> &[usize] {
        &self.plan
    }

    /// Successor of `t` in the plan, 0 after the last entry.
    pub fn next_in_plan(&self, t: usize) -> Option<usize> {
        let i = self.plan.iter().position(|&p| p == t)?;
        Some(self.plan.get(i + 1).copied().unwrap_or(0))
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Closed-form forward diffusion `z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample<F: Real>(
    z0: &Tensor<F>,
    t: usize,
    noise: &Tensor<F>,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<F>> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, s) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
    z0.zip_map(noise, |z, e| a * z + s * e)
}

/// Deterministic DDIM update from `t` to the next planned step `t_prev`.
///
/// With `clamp` set, the predicted clean latent is clipped to `±clamp` first.
pub fn ddim_step<F: Real>(
    zt: &Tensor<F>,
    eps: &Tensor<F>,
    t: usize,
    t_prev: usize,
    schedule: &DiffusionSchedule,
    clamp: Option<f64>,
) -> Result<Tensor<F>> {
    schedule.check_t(t)?;
    if schedule.next_in_plan(t) != Some(t_prev) {
        return Err(Error::Contract(format!(
            "step {t} -> {t_prev} is not in the DDIM plan"
        )));
    }
    ddim_update(zt, eps, t, t_prev, schedule, clamp)
}

/// The DDIM update for any `t > t_prev ≥ 0`, without checking the plan.
pub fn ddim_update<F: Real>(
    zt: &Tensor<F>,
    eps: &Tensor<F>,
    t: usize,
    t_prev: usize,
    schedule: &DiffusionSchedule,
    clamp: Option<f64>,
) -> Result<Tensor<F>> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Contract(format!(
            "DDIM needs t ({t}) > t_prev ({t_prev})"
        )));
    }
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let (sa, ss) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
    let (pa, ps) = (F::lit(ab_prev.sqrt()), F::lit((1.0 - ab_prev).sqrt()));
    let limit = clamp.map(F::lit);
    zt.zip_map(eps, |z, e| {
        let mut x0 = (z - ss * e) / sa;
        if let Some(c) = limit {
            x0 = x0.max(-c).min(c);
        }
        pa * x0 + ps * e
    })
}

/// Classifier-free guidance `ε_u + s·(ε_c − ε_u)`.
pub fn cfg_combine<F: Real>(cond: &Tensor<F>, uncond: &Tensor<F>, scale: f64) -> Result<Tensor<F>> {
    let s = F::lit(scale);
    cond.zip_map(uncond, |c, u| u + s * (c - u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn default_schedule_values() {
        let s = DiffusionSchedule::new(1000, 1e-4, 0.02, 30).unwrap();
        // Independent evaluation through a log-sum.
        let log: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!((s.alpha_bar(1000) - log.exp()).abs() < 1e-12);
        assert!(
            (s.alpha_bar(1000) - 4.0e-5).abs() < 0.4e-5,
            "{}",
            s.alpha_bar(1000)
        );
        assert!((1..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert_eq!(s.plan().len(), 30);
        assert_eq!(s.plan()[0], 1000);
        assert!(s.plan().windows(2).all(|w| w[0] > w[1]));
        assert!(*s.plan().last().unwrap() >= 1);
    }

    #[test]
    fn full_plan_and_validation() {
        let s = DiffusionSchedule::new(100, 1e-4, 0.02, 100).unwrap();
        assert_eq!(s.plan(), (1..=100).rev().collect::<Vec<_>>());
        assert!(DiffusionSchedule::new(10, 1e-4, 0.02, 11).is_err());
        assert!(DiffusionSchedule::new(10, 0.02, 1e-4, 5).is_err());
        assert!(DiffusionSchedule::new(10, 1e-4, 0.02, 0).is_err());
    }

    #[test]
    fn ddim_closed_forms() {
        let s = DiffusionSchedule::new(100, 1e-4, 0.02, 10).unwrap();
        let mut r = rng::stream(0, "ddim", 0);
        let z0: Tensor<f64> = Tensor::randn(&[4, 3], 1.0, &mut r);
        let eps: Tensor<f64> = Tensor::randn(&[4, 3], 1.0, &mut r);
        let zt = q_sample(&z0, 10, &eps, &s).unwrap();
        let back = ddim_step(&zt, &eps, 10, 0, &s, None).unwrap();
        assert!(back.max_abs_diff(&z0) < 1e-12);

        let zero = Tensor::zeros(&[4, 3]);
        let next = ddim_step(&zt, &zero, 50, 40, &s, None).unwrap();
        let ratio = (s.alpha_bar(40) / s.alpha_bar(50)).sqrt();
        assert!(next.max_abs_diff(&zt.map(|v| v * ratio)) < 1e-12);
        assert!(ddim_step(&zt, &zero, 50, 30, &s, None).is_err());
        assert!(ddim_step(&zt, &zero, 101, 90, &s, None).is_err());
        assert!(q_sample(&z0, 0, &eps, &s).is_err());
    }

    #[test]
    fn cfg_examples() {
        let c = Tensor::<f64>::full(&[3], 1.0);
        let u = Tensor::<f64>::zeros(&[3]);
        assert_eq!(cfg_combine(&c, &u, 7.5).unwrap().data(), &[7.5; 3]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        let same = Tensor::<f64>::new(&[2], vec![0.3, -1.7]).unwrap();
        for s in [0.0, 1.0, 7.5, 100.0] {
            assert_eq!(cfg_combine(&same, &same, s).unwrap(), same);
        }
    }
}
