use super::vlm::{Embeddings, Vlm};
use crate::data::{Mask, TokenSpan};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Mean attention over the keyword rows `prefix_len..total_len` of `A`.
pub fn mean_anomaly_attention<F: Real>(attention: &Tensor<F>, span: TokenSpan) -> Result<Vec<F>> {
    let (rows, cols) = attention.dims2();
    if span.prefix_len >= span.total_len || span.total_len > rows {
        return Err(Error::Contract(format!(
            "token span {}..{} does not fit {rows} attention rows",
            span.prefix_len, span.total_len
        )));
    }
    let mut mean = vec![F::zero(); cols];
    for r in span.prefix_len..span.total_len {
        mean.iter_mut()
            .zip(attention.row(r))
            .for_each(|(m, &a)| *m = *m + a);
    }
    let n = F::lit(span.keyword_len() as f64);
    mean.iter_mut().for_each(|m| *m = *m / n);
    Ok(mean)
}

fn masked_mass(mean: &[f64], mask: &Mask) -> Result<(f64, f64)> {
    if mean.len() != mask.data().len() {
        return Err(Error::dim("energy", &[mean.len()], &[mask.data().len()]));
    }
    let total: f64 = mean.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::UndefinedMetric("attention mass is zero".into()));
    }
    let inside: f64 = mean
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    Ok((inside, total))
}

/// In-mask share of attention mass `Σ_{i∈M} Ā_i / Σ_i Ā_i`.
pub fn concentration_ratio(mean: &[f64], patch_mask: &Mask) -> Result<f64> {
    let (inside, total) = masked_mass(mean, patch_mask)?;
    Ok(inside / total)
}

/// Attention energy `E = (1 − Σ_{i∈M} Ā_i / Σ_i Ā_i)²`.
pub fn energy(mean: &[f64], patch_mask: &Mask) -> Result<f64> {
    let r = concentration_ratio(mean, patch_mask)?;
    Ok((1.0 - r) * (1.0 - r))
}

/// Records the energy of a `[L × P]` attention variable on `tape`.
pub fn energy_on_tape<F: Real>(
    tape: &mut Tape<F>,
    attention: Var,
    span: TokenSpan,
    patch_mask: &Mask,
) -> Result<Var> {
    let rows = tape.shape(attention)[0];
    if span.prefix_len >= span.total_len || span.total_len > rows {
        return Err(Error::Contract(format!(
            "token span does not fit {rows} attention rows"
        )));
    }
    let keyword = tape.slice_rows(attention, span.prefix_len, span.total_len)?;
    let mean = tape.mean_rows(keyword);
    let inside = tape.masked_sum(mean, patch_mask.data())?;
    let total = tape.sum_all(mean);
    let mass = tape.scalar(total).as_f64();
    if mass.is_nan() || mass <= 0.0 {
        return Err(Error::UndefinedMetric("attention mass is zero".into()));
    }
    let ratio = tape.div(inside, total)?;
    let deficit = tape.scale(ratio, -F::one());
    let deficit = tape.add_scalar(deficit, F::one());
    Ok(tape.square(deficit))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AseaConfig {
    /// Step size α.
    pub alpha: f64,
    /// Number of descent steps `T_g`.
    pub steps: usize,
}

impl Default for AseaConfig {
    fn default() -> Self {
        AseaConfig {
            alpha: 0.1,
            steps: 3,
        }
    }
}

/// Result of the guidance loop.
#[derive(Clone, Debug, PartialEq)]
pub struct AseaOutcome<F> {
    /// Optimized guidance variable `e_g*`, `[P × d_v]`.
    pub guidance: Tensor<F>,
    /// Energy before each step and after the last one (`T_g + 1` values).
    pub energies: Vec<f64>,
    /// Concentration ratio at the same points.
    pub ratios: Vec<f64>,
}

/// Energy and its gradient with respect to `e_g`.
pub fn energy_and_gradient<F: Real>(
    vlm: &Vlm<F>,
    inputs: &Embeddings<F>,
    guidance: &Tensor<F>,
    span: TokenSpan,
    patch_mask: &Mask,
) -> Result<(f64, Tensor<F>)> {
    let mut tape = Tape::new();
    let t = tape.constant(&inputs.text);
    let v = tape.constant(&inputs.visual);
    let g = tape.leaf(&guidance.clone().trainable());
    let pass = vlm.forward(&mut tape, t, v, g)?;
    let e = energy_on_tape(&mut tape, pass.attention, span, patch_mask)?;
    let value = tape.scalar(e).as_f64();
    let grads = tape.backward(e)?;
    let grad = Tensor::new(guidance.shape(), grads.get_or_zeros(g, guidance.len()))?;
    Ok((value, grad))
}

/// Gradient descent `e_g ← e_g − α·∇E` from `e_g = 0`.
pub fn asea_optimize<F: Real>(
    vlm: &Vlm<F>,
    inputs: &Embeddings<F>,
    span: TokenSpan,
    patch_mask: &Mask,
    config: AseaConfig,
) -> Result<AseaOutcome<F>> {
    asea_optimize_from(vlm, inputs, span, patch_mask, config, vlm.zero_guidance())
}

/// Gradient descent from a given starting guidance variable.
pub fn asea_optimize_from<F: Real>(
    vlm: &Vlm<F>,
    inputs: &Embeddings<F>,
    span: TokenSpan,
    patch_mask: &Mask,
    config: AseaConfig,
    start: Tensor<F>,
) -> Result<AseaOutcome<F>> {
    if patch_mask.data().len() != vlm.config().patches() {
        return Err(Error::dim(
            "asea",
            &[vlm.config().patches()],
            &[patch_mask.data().len()],
        ));
    }
    let mut guidance = start;
    let mut energies = Vec::with_capacity(config.steps + 1);
    let mut ratios = Vec::with_capacity(config.steps + 1);
    let alpha = F::lit(config.alpha);
    for step in 0..=config.steps {
        let (e, grad) = energy_and_gradient(vlm, inputs, &guidance, span, patch_mask)?;
        energies.push(e);
        ratios.push(1.0 - e.sqrt());
        if step == config.steps {
            break;
        }
        if !grad.is_finite() {
            return Err(Error::Numerical {
                what: "attention guidance gradient".into(),
                step,
            });
        }
        guidance = guidance.zip_map(&grad, |g, d| g - alpha * d)?;
    }
    Ok(AseaOutcome {
        guidance,
        energies,
        ratios,
    })
}
