use super::image::{Image, Mask};
use super::texture::TextureKind;
use super::vocab::{TokenId, Vocab, TEMPLATE_PREFIX};
use crate::error::{Error, Result};

/// Location of the anomaly keyword inside a reference caption: tokens
/// `prefix_len .. total_len` (0-based, end exclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSpan {
    pub prefix_len: usize,
    pub total_len: usize,
}

impl TokenSpan {
    pub fn new(prefix_len: usize, total_len: usize) -> Result<Self> {
        if prefix_len == 0 || prefix_len >= total_len {
            return Err(Error::Contract(format!(
                "token span needs 0 < prefix ({prefix_len}) < total ({total_len})"
            )));
        }
        Ok(TokenSpan {
            prefix_len,
            total_len,
        })
    }

    pub fn keyword_len(&self) -> usize {
        self.total_len - self.prefix_len
    }
}

/// One reference/target example.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    pub reference_image: Image,
    pub reference_text: Vec<TokenId>,
    pub span: TokenSpan,
    pub anomaly_mask: Mask,
    pub targeted_text: Vec<TokenId>,
    /// Vocabulary id of the anomaly type word.
    pub keyword: TokenId,
}

pub fn reference_caption(keyword: &str) -> String {
    format!("{TEMPLATE_PREFIX} {keyword}")
}

/// Caption of a target image; `None` describes a defect-free surface.
pub fn target_caption(texture: TextureKind, keyword: Option<&str>) -> String {
    match keyword {
        Some(k) => format!("a {texture} surface with {k}"),
        None => format!("a {texture} surface"),
    }
}

/// Builds a prompt pair. The reference and target keywords only have to
/// name the same anomaly type; background and texture are unconstrained.
pub fn make_prompt_pair(
    reference: &Image,
    mask: &Mask,
    keyword: &str,
    target_texture: TextureKind,
    target_keyword: &str,
    vocab: &Vocab,
) -> Result<PromptPair> {
    let kind = vocab.anomaly_type(keyword)?;
    let target_kind = vocab.anomaly_type(target_keyword)?;
    if kind != target_kind {
        return Err(Error::PairMismatch {
            reference: keyword.to_string(),
            target: target_keyword.to_string(),
        });
    }
    if mask.is_empty() {
        return Err(Error::Validation("anomaly mask is empty".into()));
    }
    if (mask.height(), mask.width()) != (reference.height(), reference.width()) {
        return Err(Error::dim(
            "make_prompt_pair",
            &[reference.height(), reference.width()],
            &[mask.height(), mask.width()],
        ));
    }
    let reference_text = vocab.tokenize(&reference_caption(keyword))?;
    let span = TokenSpan::new(vocab.prefix_len(), reference_text.len())?;
    Ok(PromptPair {
        reference_image: reference.clone(),
        reference_text,
        span,
        anomaly_mask: mask.clone(),
        targeted_text: vocab.tokenize(&target_caption(target_texture, Some(target_keyword)))?,
        keyword: vocab.id(kind.name())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::texture::gen_normal;

    fn fixture() -> (Image, Mask) {
        let img = gen_normal(TextureKind::Stripes, 1, 32).unwrap();
        let mut m = Mask::empty(32, 32);
        m.set(4, 4, true);
        (img, m)
    }

    #[test]
    fn template_and_span() {
        let v = Vocab::new();
        let (img, m) = fixture();
        let p = make_prompt_pair(&img, &m, "scratch", TextureKind::Checker, "scratch", &v).unwrap();
        assert_eq!(
            v.detokenize(&p.reference_text).unwrap(),
            "This is an image with scratch"
        );
        assert_eq!(p.span.total_len, p.span.prefix_len + 1);
        let kw: Vec<_> = p.reference_text[p.span.prefix_len..p.span.total_len].to_vec();
        assert_eq!(v.detokenize(&kw).unwrap(), "scratch");
        assert_eq!(
            v.detokenize(&p.targeted_text).unwrap(),
            "a checker surface with scratch"
        );

        let p = make_prompt_pair(
            &img,
            &m,
            "long thin scratch",
            TextureKind::Noise,
            "scratch",
            &v,
        )
        .unwrap();
        let kw: Vec<_> = p.reference_text[p.span.prefix_len..].to_vec();
        assert_eq!(v.detokenize(&kw).unwrap(), "long thin scratch");
    }

    #[test]
    fn non_matching_contract() {
        let v = Vocab::new();
        let (img, m) = fixture();
        // Stripes reference for a checker target is fine; a different anomaly is not.
        assert!(make_prompt_pair(&img, &m, "spot", TextureKind::Checker, "dark spot", &v).is_ok());
        assert!(matches!(
            make_prompt_pair(&img, &m, "spot", TextureKind::Checker, "crack", &v),
            Err(Error::PairMismatch { .. })
        ));
        assert!(make_prompt_pair(
            &img,
            &Mask::empty(32, 32),
            "spot",
            TextureKind::Checker,
            "spot",
            &v
        )
        .is_err());
    }
}
