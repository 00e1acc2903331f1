use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::params::{nn, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor};

/// Frozen text encoder: token and position tables followed by one
/// self-attention layer. A pure function of token ids and its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder<F> {
    width: usize,
    max_len: usize,
    heads: usize,
    params: ParamStore<F>,
}

impl<F: Real> TextEncoder<F> {
    pub fn new(vocab_len: usize, width: usize, max_len: usize, seed: u64) -> Result<Self> {
        let heads = 2;
        if width == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "text width {width} must be a positive even number"
            )));
        }
        let mut r = rng::stream(seed, "text_encoder", 0);
        let mut params = ParamStore::new();
        params.insert("tok", Tensor::randn(&[vocab_len, width], 1.0, &mut r));
        params.insert("pos", Tensor::randn(&[max_len, width], 0.5, &mut r));
        nn::init_layer_norm(&mut params, "attn.norm", width);
        for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
            params.insert(
                format!("{name}.w"),
                nn::orthogonal(width, width, 1.0, &mut r),
            );
        }
        nn::init_layer_norm(&mut params, "out.norm", width);
        Ok(TextEncoder {
            width,
            max_len,
            heads,
            params,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    /// Embedding sequence `C` of shape `[L × width]`.
    pub fn encode(&self, tokens: &[TokenId]) -> Result<Tensor<F>> {
        let vocab = self.params.get("tok")?.shape()[0];
        if tokens.is_empty() || tokens.len() > self.max_len {
            return Err(Error::Validation(format!(
                "text of {} tokens, encoder accepts 1..={}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Vocabulary(format!("token id {bad}")));
        }
        let mut tape = Tape::new();
        let p = &self.params;
        let tok = p.bind(&mut tape, "tok")?;
        let pos = p.bind(&mut tape, "pos")?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let e = tape.gather_rows(tok, &ids)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pe = tape.gather_rows(pos, &positions)?;
        let h = tape.add(e, pe)?;
        let n = nn::layer_norm(&mut tape, p, "attn.norm", h)?;
        let q = nn::linear(&mut tape, p, "attn.q", n)?;
        let k = nn::linear(&mut tape, p, "attn.k", n)?;
        let v = nn::linear(&mut tape, p, "attn.v", n)?;
        let (a, _) = nn::attention(&mut tape, q, k, v, self.heads)?;
        let a = nn::linear(&mut tape, p, "attn.o", a)?;
        let h = tape.add(h, a)?;
        let out = nn::layer_norm(&mut tape, p, "out.norm", h)?;
        Ok(tape.tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;

    #[test]
    fn deterministic_and_shaped() {
        let v = Vocab::new();
        let enc = TextEncoder::<f32>::new(v.len(), 32, 8, 4).unwrap();
        let ids = v.tokenize("a checker surface with crack").unwrap();
        let c = enc.encode(&ids).unwrap();
        assert_eq!(c.shape(), &[5, 32]);
        assert_eq!(
            c,
            TextEncoder::<f32>::new(v.len(), 32, 8, 4)
                .unwrap()
                .encode(&ids)
                .unwrap()
        );
        let other = TextEncoder::<f32>::new(v.len(), 32, 8, 5).unwrap();
        assert_ne!(c, other.encode(&ids).unwrap());
        assert!(enc.encode(&[]).is_err());
        assert!(matches!(enc.encode(&[9999]), Err(Error::Vocabulary(_))));
    }
}
