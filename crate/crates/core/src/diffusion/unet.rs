use crate::adapter::{decoupled_cross_attention, AdapterState, BlockWeights};
use crate::error::{Error, Result};
use crate::params::{nn, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Noise predictions and the flattened bottleneck features of each item.
pub type PredictionWithMid<F> = (Vec<Tensor<F>>, Vec<Vec<F>>);

/// Names of the denoiser's cross-attention blocks, outermost first.
pub const ATTENTION_BLOCKS: [&str; 2] = ["attn1", "attn2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Latent grid side; must be even.
    pub grid: usize,
    pub channels: usize,
    pub base_width: usize,
    pub mid_width: usize,
    pub text_width: usize,
    pub time_width: usize,
    pub steps: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.base_width,
            self.mid_width,
            self.text_width,
            self.time_width,
            self.channels,
        ];
        if self.grid < 2 || !self.grid.is_multiple_of(2) || widths.contains(&0) || self.steps == 0 {
            return Err(Error::Config(format!(
                "invalid denoiser configuration {self:?}"
            )));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.grid * self.grid
    }

    /// `(block name, attention width)` for every cross-attention block.
    pub fn attention_blocks(&self) -> Vec<(String, usize)> {
        vec![
            (ATTENTION_BLOCKS[0].to_string(), self.base_width),
            (ATTENTION_BLOCKS[1].to_string(), self.mid_width),
        ]
    }
}

/// Per-sample conditioning of a batched denoiser call.
#[derive(Clone, Debug)]
pub struct Conditioning<F> {
    /// Text embedding `C`, `[L × text_width]`.
    pub text: Tensor<F>,
    /// Cross-modal feature `C′`, `[L′ × d_c]`; `None` skips the adapter branch.
    pub feature: Option<Tensor<F>>,
}

/// Variables produced by one denoiser pass.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserOutput {
    /// Predicted noise, `[B·h·w × channels]`.
    pub eps: Var,
    /// Bottleneck activations after the inner cross-attention block.
    pub mid: Var,
}

/// Two-level U-Net predicting ε from `(z_t, t, C, C′)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<F> {
    config: DenoiserConfig,
    params: ParamStore<F>,
}

fn sinusoid(steps: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(steps * width);
    for t in 1..=steps {
        for i in 0..width {
            let freq = (-(10_000f64.ln()) * (i % half) as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out.push(if i < half { a.sin() } else { a.cos() });
        }
    }
    out
}

impl<F: Real> Denoiser<F> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "denoiser", 0);
        let mut p = ParamStore::new();
        let (b, m, tw) = (config.base_width, config.mid_width, config.time_width);
        let temb = 2 * tw;
        let table = sinusoid(config.steps, tw).into_iter().map(F::lit).collect();
        p.insert("time.table", Tensor::new(&[config.steps, tw], table)?);
        nn::init_linear(&mut p, "time.fc1", tw, temb, 1.0, true, &mut r);
        nn::init_linear(&mut p, "time.fc2", temb, temb, 1.0, true, &mut r);
        nn::init_conv(&mut p, "in", 3, config.channels, b, 1.0, &mut r);
        p.insert("pos", Tensor::randn(&[config.positions(), b], 0.5, &mut r));
        let mut resblock = |p: &mut ParamStore<F>, name: &str, cin: usize, cout: usize| {
            nn::init_layer_norm(p, &format!("{name}.norm1"), cin);
            nn::init_conv(p, &format!("{name}.conv1"), 3, cin, cout, 1.0, &mut r);
            nn::init_linear(p, &format!("{name}.time"), temb, cout, 1.0, true, &mut r);
            nn::init_layer_norm(p, &format!("{name}.norm2"), cout);
            nn::init_conv(p, &format!("{name}.conv2"), 3, cout, cout, 0.5, &mut r);
            if cin != cout {
                nn::init_linear(p, &format!("{name}.skip"), cin, cout, 1.0, false, &mut r);
            }
        };
        resblock(&mut p, "res1", b, b);
        resblock(&mut p, "res2", b, m);
        resblock(&mut p, "res3", m + b, b);
        for (name, width) in config.attention_blocks() {
            nn::init_layer_norm(&mut p, &format!("{name}.norm"), width);
            nn::init_linear(
                &mut p,
                &format!("{name}.q"),
                width,
                width,
                1.0,
                false,
                &mut r,
            );
            nn::init_linear(
                &mut p,
                &format!("{name}.k"),
                config.text_width,
                width,
                1.0,
                false,
                &mut r,
            );
            nn::init_linear(
                &mut p,
                &format!("{name}.v"),
                config.text_width,
                width,
                1.0,
                false,
                &mut r,
            );
            nn::init_linear(
                &mut p,
                &format!("{name}.o"),
                width,
                width,
                0.5,
                true,
                &mut r,
            );
        }
        nn::init_layer_norm(&mut p, "out.norm", b);
        // The output head also sees the noisy latent, so noise can pass
        // through even when `base_width` is below the latent channel count.
        p.insert(
            "out.w",
            Tensor::zeros(&[9 * (b + config.channels), config.channels]),
        );
        p.insert("out.b", Tensor::zeros(&[1, config.channels]));
        Ok(Denoiser { config, params: p })
    }

    /// Wraps loaded parameters after checking them against a fresh layout.
    pub fn from_params(config: DenoiserConfig, params: ParamStore<F>) -> Result<Self> {
        let layout = Self::new(config, 0)?;
        if params.names() != layout.params.names() {
            return Err(Error::Format(
                "denoiser parameter names do not match the configuration".into(),
            ));
        }
        for (name, t) in layout.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "denoiser parameter {name} has the wrong shape"
                )));
            }
        }
        Ok(Denoiser { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        Denoiser {
            config: self.config,
            params: self.params.cast(),
        }
    }

    fn resblock(
        &self,
        tape: &mut Tape<F>,
        name: &str,
        x: Var,
        temb: Var,
        rows: &[usize],
        side: usize,
    ) -> Result<Var> {
        let p = &self.params;
        let h = nn::layer_norm(tape, p, &format!("{name}.norm1"), x)?;
        let h = tape.gelu(h);
        let h = nn::conv(tape, p, &format!("{name}.conv1"), h, side, side)?;
        let t = nn::linear(tape, p, &format!("{name}.time"), temb)?;
        let t = tape.gather_rows(t, rows)?;
        let h = tape.add(h, t)?;
        let h = nn::layer_norm(tape, p, &format!("{name}.norm2"), h)?;
        let h = tape.gelu(h);
        let h = nn::conv(tape, p, &format!("{name}.conv2"), h, side, side)?;
        let skip_name = format!("{name}.skip");
        let skip = if p.contains(&format!("{skip_name}.w")) {
            nn::linear(tape, p, &skip_name, x)?
        } else {
            x
        };
        tape.add(skip, h)
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_attention(
        &self,
        tape: &mut Tape<F>,
        name: &str,
        x: Var,
        positions: usize,
        text: &[Var],
        feature: &[Option<Var>],
        adapter: Option<&AdapterState<F>>,
    ) -> Result<Var> {
        let p = &self.params;
        let zn = nn::layer_norm(tape, p, &format!("{name}.norm"), x)?;
        let weights = BlockWeights {
            query: p.bind(tape, &format!("{name}.q.w"))?,
            key: p.bind(tape, &format!("{name}.k.w"))?,
            value: p.bind(tape, &format!("{name}.v.w"))?,
        };
        let block = match adapter {
            Some(a) if feature.iter().any(Option::is_some) => Some(a.bind(tape, name)?),
            _ => None,
        };
        let gamma = adapter.map(|a| a.gamma_f()).unwrap_or_else(F::zero);
        let mut outs = Vec::with_capacity(text.len());
        for (i, (&c, &f)) in text.iter().zip(feature).enumerate() {
            let z = tape.slice_rows(zn, i * positions, (i + 1) * positions)?;
            outs.push(decoupled_cross_attention(
                tape,
                z,
                c,
                f,
                &weights,
                block.as_ref(),
                gamma,
            )?);
        }
        let att = tape.concat_rows(&outs)?;
        let att = nn::linear(tape, p, &format!("{name}.o"), att)?;
        tape.add(x, att)
    }

    /// Batched forward pass. `z` stacks `B` latents as `[B·h·w × channels]`.
    ///
    /// Samples with a feature use the adapter branch; a feature without an
    /// adapter is a configuration error.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        z: Var,
        timesteps: &[usize],
        cond: &[Conditioning<F>],
        adapter: Option<&AdapterState<F>>,
    ) -> Result<DenoiserOutput> {
        let c = &self.config;
        let (batch, side, pos) = (timesteps.len(), c.grid, c.positions());
        if cond.len() != batch || tape.shape(z) != [batch * pos, c.channels] {
            return Err(Error::dim(
                "denoiser",
                tape.shape(z),
                &[batch * pos, c.channels],
            ));
        }
        if let Some(t) = timesteps.iter().find(|&&t| t == 0 || t > c.steps) {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                c.steps
            )));
        }
        if adapter.is_none() && cond.iter().any(|k| k.feature.is_some()) {
            return Err(Error::Config(
                "cross-modal feature supplied without an adapter".into(),
            ));
        }
        let p = &self.params;
        let text: Vec<Var> = cond.iter().map(|k| tape.constant(&k.text)).collect();
        let feature: Vec<Option<Var>> = cond
            .iter()
            .map(|k| k.feature.as_ref().map(|f| tape.constant(f)))
            .collect();

        let table = p.bind(tape, "time.table")?;
        let rows: Vec<usize> = timesteps.iter().map(|&t| t - 1).collect();
        let temb = tape.gather_rows(table, &rows)?;
        let temb = nn::linear(tape, p, "time.fc1", temb)?;
        let temb = tape.gelu(temb);
        let temb = nn::linear(tape, p, "time.fc2", temb)?;
        let rows_hi: Vec<usize> = (0..batch * pos).map(|i| i / pos).collect();
        let rows_lo: Vec<usize> = (0..batch * pos / 4).map(|i| i / (pos / 4)).collect();

        let h = nn::conv(tape, p, "in", z, side, side)?;
        let pe = p.bind(tape, "pos")?;
        let pos_rows: Vec<usize> = (0..batch * pos).map(|i| i % pos).collect();
        let pe = tape.gather_rows(pe, &pos_rows)?;
        let h = tape.add(h, pe)?;
        let h1 = self.resblock(tape, "res1", h, temb, &rows_hi, side)?;
        let h1 = self.cross_attention(tape, "attn1", h1, pos, &text, &feature, adapter)?;

        let d = tape.avg_pool2(h1, side, side)?;
        let h2 = self.resblock(tape, "res2", d, temb, &rows_lo, side / 2)?;
        let mid = self.cross_attention(tape, "attn2", h2, pos / 4, &text, &feature, adapter)?;

        let u = tape.upsample2(mid, side / 2, side / 2)?;
        let u = tape.concat_cols(&[u, h1])?;
        let u = self.resblock(tape, "res3", u, temb, &rows_hi, side)?;
        let o = nn::layer_norm(tape, p, "out.norm", u)?;
        let o = tape.gelu(o);
        let o = tape.concat_cols(&[o, z])?;
        let eps = nn::conv(tape, p, "out", o, side, side)?;
        Ok(DenoiserOutput { eps, mid })
    }

    /// Untracked prediction for a batch of latents, each `[h, w, channels]`.
    pub fn predict(
        &self,
        latents: &[Tensor<F>],
        timesteps: &[usize],
        cond: &[Conditioning<F>],
        adapter: Option<&AdapterState<F>>,
    ) -> Result<Vec<Tensor<F>>> {
        let (out, _) = self.predict_with_mid(latents, timesteps, cond, adapter)?;
        Ok(out)
    }

    /// Like [`Denoiser::predict`], also returning bottleneck features.
    pub fn predict_with_mid(
        &self,
        latents: &[Tensor<F>],
        timesteps: &[usize],
        cond: &[Conditioning<F>],
        adapter: Option<&AdapterState<F>>,
    ) -> Result<PredictionWithMid<F>> {
        let mut tape = Tape::new();
        let z = stack_latents(&mut tape, latents)?;
        let out = self.forward(&mut tape, z, timesteps, cond, adapter)?;
        let shape = latents[0].shape().to_vec();
        let eps = tape
            .value(out.eps)
            .chunks(self.config.positions() * self.config.channels)
            .map(|c| Tensor::new(&shape, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let mid_len = tape.value(out.mid).len() / latents.len();
        let mid = tape
            .value(out.mid)
            .chunks(mid_len)
            .map(<[F]>::to_vec)
            .collect();
        Ok((eps, mid))
    }
}

/// Records `B` latents as one `[B·h·w × c]` constant.
pub fn stack_latents<F: Real>(tape: &mut Tape<F>, latents: &[Tensor<F>]) -> Result<Var> {
    let first = latents
        .first()
        .ok_or_else(|| Error::Contract("empty latent batch".into()))?;
    let (p, c) = first.dims2();
    let mut data = Vec::with_capacity(latents.len() * p * c);
    for l in latents {
        if l.shape() != first.shape() {
            return Err(Error::dim("stack_latents", first.shape(), l.shape()));
        }
        data.extend_from_slice(l.data());
    }
    tape.constant_from(&[latents.len() * p, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterState;

    pub(crate) fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            grid: 4,
            channels: 3,
            base_width: 8,
            mid_width: 8,
            text_width: 6,
            time_width: 4,
            steps: 10,
        }
    }

    fn inputs(
        seed: u64,
        batch: usize,
        feature: bool,
    ) -> (Vec<Tensor<f64>>, Vec<Conditioning<f64>>) {
        let mut r = rng::stream(seed, "unet-test", 0);
        let z = (0..batch)
            .map(|_| Tensor::randn(&[4, 4, 3], 1.0, &mut r))
            .collect();
        let c = (0..batch)
            .map(|_| Conditioning {
                text: Tensor::randn(&[3, 6], 1.0, &mut r),
                feature: feature.then(|| Tensor::randn(&[2, 5], 1.0, &mut r)),
            })
            .collect();
        (z, c)
    }

    #[test]
    fn zero_adapter_matches_base() {
        let net = Denoiser::<f64>::new(tiny(), 1).unwrap();
        let adapter = AdapterState::new(&tiny().attention_blocks(), 5, 1.0, 2).unwrap();
        let (z, c) = inputs(3, 2, true);
        let with = net.predict(&z, &[3, 7], &c, Some(&adapter)).unwrap();
        let plain: Vec<_> = c
            .iter()
            .map(|k| Conditioning {
                text: k.text.clone(),
                feature: None,
            })
            .collect();
        let without = net.predict(&z, &[3, 7], &plain, None).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn batching_matches_single_samples() {
        let mut net = Denoiser::<f64>::new(tiny(), 1).unwrap();
        let mut r = rng::stream(9, "unet-test", 1);
        let out = Tensor::randn(net.params().get("out.w").unwrap().shape(), 0.1, &mut r);
        net.params_mut().insert("out.w", out);
        let (z, c) = inputs(4, 3, false);
        let batched = net.predict(&z, &[1, 5, 10], &c, None).unwrap();
        for (i, t) in [1, 5, 10].into_iter().enumerate() {
            let single = net.predict(&z[i..=i], &[t], &c[i..=i], None).unwrap();
            assert!(single[0].max_abs_diff(&batched[i]) < 1e-12);
        }
        assert!(batched[0].max_abs_diff(&batched[1]) > 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = Denoiser::<f64>::new(tiny(), 1).unwrap();
        let (z, c) = inputs(5, 1, true);
        assert!(matches!(
            net.predict(&z, &[3], &c, None),
            Err(Error::Config(_))
        ));
        let (z, c) = inputs(5, 1, false);
        assert!(net.predict(&z, &[0], &c, None).is_err());
        assert!(net.predict(&z, &[11], &c, None).is_err());
        let loaded = Denoiser::from_params(tiny(), net.params().clone()).unwrap();
        assert_eq!(loaded, net);
    }
}
