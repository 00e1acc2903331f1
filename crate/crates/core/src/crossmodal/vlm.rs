use crate::codec::{self, LatentSpec};
use crate::data::{Image, TokenId};
use crate::error::{Error, Result};
use crate::params::{nn, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VlmConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Width `d_c` of the emitted feature.
    pub feature_width: usize,
    pub max_len: usize,
    /// Standard deviation of visual embeddings; small values make attention
    /// respond strongly to the guidance offset.
    pub visual_scale: f64,
    /// Gain of the query and key projections.
    pub attention_gain: f64,
}

impl Default for VlmConfig {
    fn default() -> Self {
        VlmConfig {
            image_size: 32,
            patch: 4,
            width: 32,
            heads: 2,
            layers: 2,
            feature_width: 32,
            max_len: 8,
            visual_scale: 0.05,
            attention_gain: 5.0,
        }
    }
}

impl VlmConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.patch > 0
            && self.image_size.is_multiple_of(self.patch)
            && self.heads > 0
            && self.width.is_multiple_of(self.heads)
            && self.layers > 0
            && self.feature_width > 0
            && self.max_len > 0
            && self.visual_scale > 0.0
            && self.attention_gain > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid VLM configuration {self:?}")));
        }
        Ok(())
    }

    /// Number of image patches `P`.
    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_spec(&self) -> LatentSpec {
        LatentSpec { factor: self.patch }
    }
}

/// Text and visual embeddings `(e_t, e_v)` of one reference prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings<F> {
    pub text: Tensor<F>,
    pub visual: Tensor<F>,
}

/// Frozen vision-language stack: text queries cross-attend to image patches
/// in every layer, each layer followed by a feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct Vlm<F> {
    config: VlmConfig,
    params: ParamStore<F>,
}

/// Variables of one recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VlmPass {
    /// Head-averaged attention `[L × P]` of the final layer.
    pub attention: Var,
    /// Projected feature `C′`, `[L × d_c]`.
    pub feature: Var,
}

impl<F: Real> Vlm<F> {
    pub fn new(config: VlmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "vlm", 0);
        let d = config.width;
        let sv = config.visual_scale;
        let g = config.attention_gain;
        let pdim = config.patch_spec().channels();
        let mut p = ParamStore::new();
        p.insert(
            "tok",
            Tensor::randn(&[crate::data::Vocab::new().len(), d], 1.0, &mut r),
        );
        p.insert("tpos", Tensor::randn(&[config.max_len, d], 0.5, &mut r));
        p.insert("patch.w", nn::orthogonal(pdim, d, sv, &mut r));
        p.insert("vpos", Tensor::randn(&[config.patches(), d], sv, &mut r));
        for l in 0..config.layers {
            nn::init_layer_norm(&mut p, &format!("layer{l}.norm1"), d);
            p.insert(format!("layer{l}.q.w"), nn::orthogonal(d, d, g, &mut r));
            p.insert(format!("layer{l}.k.w"), nn::orthogonal(d, d, g, &mut r));
            p.insert(
                format!("layer{l}.v.w"),
                nn::orthogonal(d, d, 1.0 / sv, &mut r),
            );
            p.insert(format!("layer{l}.o.w"), nn::orthogonal(d, d, 1.0, &mut r));
            nn::init_layer_norm(&mut p, &format!("layer{l}.norm2"), d);
            nn::init_linear(
                &mut p,
                &format!("layer{l}.ff1"),
                d,
                2 * d,
                1.0,
                true,
                &mut r,
            );
            nn::init_linear(
                &mut p,
                &format!("layer{l}.ff2"),
                2 * d,
                d,
                1.0,
                true,
                &mut r,
            );
        }
        nn::init_layer_norm(&mut p, "out.norm", d);
        p.insert(
            "proj.w",
            nn::orthogonal(d, config.feature_width, 1.0, &mut r),
        );
        Ok(Vlm { config, params: p })
    }

    pub fn config(&self) -> &VlmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn cast<G: Real>(&self) -> Vlm<G> {
        Vlm {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// `(e_t, e_v)` with position embeddings added.
    pub fn embed_inputs(&self, image: &Image, tokens: &[TokenId]) -> Result<Embeddings<F>> {
        self.embed_inputs_with(image, tokens, true)
    }

    /// Like [`Vlm::embed_inputs`]; `positions = false` leaves out both
    /// position tables so patch content alone determines `e_v`.
    pub fn embed_inputs_with(
        &self,
        image: &Image,
        tokens: &[TokenId],
        positions: bool,
    ) -> Result<Embeddings<F>> {
        let c = &self.config;
        if image.height() != c.image_size || image.width() != c.image_size {
            return Err(Error::dim(
                "embed_inputs",
                &[image.height(), image.width()],
                &[c.image_size, c.image_size],
            ));
        }
        if tokens.is_empty() || tokens.len() > c.max_len {
            return Err(Error::Validation(format!(
                "reference text of {} tokens, VLM accepts 1..={}",
                tokens.len(),
                c.max_len
            )));
        }
        let tok = self.params.get("tok")?;
        let mut text = Vec::with_capacity(tokens.len() * c.width);
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= tok.shape()[0] {
                return Err(Error::Vocabulary(format!("token id {t}")));
            }
            let row = tok.row(t);
            if positions {
                let pos = self.params.get("tpos")?.row(i);
                text.extend(row.iter().zip(pos).map(|(&a, &b)| a + b));
            } else {
                text.extend_from_slice(row);
            }
        }
        let patches = codec::encode::<F>(image, c.patch_spec())?;
        let patches = patches.reshape(&[c.patches(), c.patch_spec().channels()])?;
        let mut visual = patches.matmul(self.params.get("patch.w")?)?;
        if positions {
            visual = visual.zip_map(self.params.get("vpos")?, |a, b| a + b)?;
        }
        Ok(Embeddings {
            text: Tensor::new(&[tokens.len(), c.width], text)?,
            visual,
        })
    }

    /// Records the stack on `tape` for text `e_t` attending over `e_v + e_g`.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        text: Var,
        visual: Var,
        guidance: Var,
    ) -> Result<VlmPass> {
        let p = &self.params;
        let image = tape.add(visual, guidance)?;
        let mut h = text;
        let mut attention = None;
        for l in 0..self.config.layers {
            let n = nn::layer_norm(tape, p, &format!("layer{l}.norm1"), h)?;
            let q = nn::linear(tape, p, &format!("layer{l}.q"), n)?;
            let k = nn::linear(tape, p, &format!("layer{l}.k"), image)?;
            let v = nn::linear(tape, p, &format!("layer{l}.v"), image)?;
            let (a, weights) = nn::attention(tape, q, k, v, self.config.heads)?;
            attention = Some(weights);
            let a = nn::linear(tape, p, &format!("layer{l}.o"), a)?;
            h = tape.add(h, a)?;
            let n = nn::layer_norm(tape, p, &format!("layer{l}.norm2"), h)?;
            let f = nn::linear(tape, p, &format!("layer{l}.ff1"), n)?;
            let f = tape.gelu(f);
            let f = nn::linear(tape, p, &format!("layer{l}.ff2"), f)?;
            h = tape.add(h, f)?;
        }
        let out = nn::layer_norm(tape, p, "out.norm", h)?;
        let feature = nn::linear(tape, p, "proj", out)?;
        Ok(VlmPass {
            attention: attention.expect("at least one layer"),
            feature,
        })
    }

    fn run(&self, inputs: &Embeddings<F>, guidance: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut tape = Tape::new();
        let t = tape.constant(&inputs.text);
        let v = tape.constant(&inputs.visual);
        let g = tape.constant(guidance);
        let pass = self.forward(&mut tape, t, v, g)?;
        Ok((tape.tensor(pass.attention), tape.tensor(pass.feature)))
    }

    /// Final-layer attention map `A = VLM_crossattn(e_t, e_v + e_g)`, `[L × P]`.
    pub fn attention_map(&self, inputs: &Embeddings<F>, guidance: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.run(inputs, guidance)?.0)
    }

    /// Cross-modal feature `C′ = VLM(e_t, e_v + e_g)`, `[L × d_c]`.
    pub fn cross_modal_feature(
        &self,
        inputs: &Embeddings<F>,
        guidance: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        Ok(self.run(inputs, guidance)?.1)
    }

    /// A zero guidance variable shaped like `e_v`.
    pub fn zero_guidance(&self) -> Tensor<F> {
        Tensor::zeros(&[self.config.patches(), self.config.width])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_normal, TextureKind, Vocab};

    fn setup() -> (Vlm<f64>, Image, Vec<TokenId>) {
        let vlm = Vlm::new(VlmConfig::default(), 3).unwrap();
        let img = gen_normal(TextureKind::Noise, 4, 32).unwrap();
        let ids = Vocab::new()
            .tokenize("This is an image with crack")
            .unwrap();
        (vlm, img, ids)
    }

    #[test]
    fn embedding_shapes_and_determinism() {
        let (vlm, img, ids) = setup();
        let e = vlm.embed_inputs(&img, &ids).unwrap();
        assert_eq!(e.text.shape(), &[6, 32]);
        assert_eq!(e.visual.shape(), &[64, 32]);
        assert_eq!(
            e,
            Vlm::<f64>::new(VlmConfig::default(), 3)
                .unwrap()
                .embed_inputs(&img, &ids)
                .unwrap()
        );
        assert!(matches!(
            vlm.embed_inputs(&img, &[999]),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn permuting_patches_permutes_visual_rows() {
        let (vlm, img, ids) = setup();
        // Swap patch (0,0) with patch (2,5).
        let mut swapped = img.clone();
        for y in 0..4 {
            for x in 0..4 {
                let (a, b) = (img.pixel(y, x), img.pixel(8 + y, 20 + x));
                swapped.set_pixel(y, x, b);
                swapped.set_pixel(8 + y, 20 + x, a);
            }
        }
        let e = vlm.embed_inputs_with(&img, &ids, false).unwrap();
        let s = vlm.embed_inputs_with(&swapped, &ids, false).unwrap();
        let (p, q) = (0, 2 * 8 + 5);
        assert_eq!(e.visual.row(p), s.visual.row(q));
        assert_eq!(e.visual.row(q), s.visual.row(p));
        assert_eq!(e.visual.row(7), s.visual.row(7));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (vlm, img, ids) = setup();
        let e = vlm.embed_inputs(&img, &ids).unwrap();
        let a = vlm.attention_map(&e, &vlm.zero_guidance()).unwrap();
        assert_eq!(a.shape(), &[6, 64]);
        for r in 0..6 {
            let s: f64 = a.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(a.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn key_aligned_offset_raises_patch_mass() {
        let config = VlmConfig {
            layers: 1,
            heads: 1,
            ..VlmConfig::default()
        };
        let vlm = Vlm::<f64>::new(config, 5).unwrap();
        let (_, img, ids) = setup();
        let e = vlm.embed_inputs(&img, &ids).unwrap();
        // Key direction of the mean query: W_k · mean_i(LN(e_t) W_q)ᵀ.
        let mut tape = Tape::new();
        let t = tape.constant(&e.text);
        let n = nn::layer_norm(&mut tape, &vlm.params, "layer0.norm1", t).unwrap();
        let q = nn::linear(&mut tape, &vlm.params, "layer0.q", n).unwrap();
        let q = tape.mean_rows(q);
        let q = tape.tensor(q);
        let dir = vlm
            .params
            .get("layer0.k.w")
            .unwrap()
            .matmul(&q.transpose())
            .unwrap();
        let patch = 27;
        let mut g = vlm.zero_guidance();
        for j in 0..32 {
            g.data_mut()[patch * 32 + j] = 0.5 * dir.data()[j];
        }
        let before = vlm.attention_map(&e, &vlm.zero_guidance()).unwrap();
        let after = vlm.attention_map(&e, &g).unwrap();
        let mass = |a: &Tensor<f64>| (0..6).map(|r| a.get2(r, patch)).sum::<f64>();
        assert!(mass(&after) > mass(&before));
    }
}
