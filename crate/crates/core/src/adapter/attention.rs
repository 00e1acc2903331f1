use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Frozen text-attention projections of one denoiser block, bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Trainable cross-modal projections `W_k′`, `W_v′` of one block.
#[derive(Clone, Copy, Debug)]
pub struct AdapterBlock {
    pub key: Var,
    pub value: Var,
}

/// Decoupled cross-attention for one sample:
/// `softmax(QKᵀ/√d)V + γ·softmax(QK′ᵀ/√d)V′` with `Q = Z·W_q`, `K = C·W_k`,
/// `V = C·W_v`, `K′ = C′·W_k′`, `V′ = C′·W_v′`.
///
/// The second branch is skipped when either the feature or the adapter is
/// absent; a zero feature or a zero `W_v′` contributes exactly zero anyway.
pub fn decoupled_cross_attention<F: Real>(
    tape: &mut Tape<F>,
    z: Var,
    text: Var,
    feature: Option<Var>,
    weights: &BlockWeights,
    adapter: Option<&AdapterBlock>,
    gamma: F,
) -> Result<Var> {
    let q = tape.matmul(z, weights.query)?;
    let d = tape.shape(q)[1];
    let scale = F::lit(1.0 / (d as f64).sqrt());
    let attend = |tape: &mut Tape<F>, kw: Var, vw: Var, src: Var| -> Result<Var> {
        let k = tape.matmul(src, kw)?;
        let v = tape.matmul(src, vw)?;
        if tape.shape(k)[1] != d || tape.shape(v)[1] != d {
            return Err(Error::dim(
                "decoupled_cross_attention",
                tape.shape(q),
                tape.shape(k),
            ));
        }
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, scale);
        let a = tape.softmax_rows(logits);
        tape.matmul(a, v)
    };
    let base = attend(tape, weights.key, weights.value, text)?;
    match (feature, adapter) {
        (Some(c), Some(ad)) => {
            let extra = attend(tape, ad.key, ad.value, c)?;
            let extra = tape.scale(extra, gamma);
            tape.add(base, extra)
        }
        _ => Ok(base),
    }
}

/// Trainable adapter parameters: per block `<block>.k_prime` and
/// `<block>.v_prime`, both `[d_c × d]`, plus the blend weight γ.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState<F> {
    pub gamma: f64,
    feature_width: usize,
    blocks: Vec<(String, usize)>,
    params: ParamStore<F>,
}

impl<F: Real> AdapterState<F> {
    /// `W_v′` starts at zero so the adapted model equals the base model;
    /// `W_k′` starts small and random.
    pub fn new(
        blocks: &[(String, usize)],
        feature_width: usize,
        gamma: f64,
        seed: u64,
    ) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be finite, got {gamma}")));
        }
        let mut r = rng::stream(seed, "adapter", 0);
        let mut params = ParamStore::new();
        for (name, width) in blocks {
            let std = 0.1 / (feature_width as f64).sqrt();
            params.insert(
                format!("{name}.k_prime"),
                Tensor::randn(&[feature_width, *width], std, &mut r),
            );
            params.insert(
                format!("{name}.v_prime"),
                Tensor::zeros(&[feature_width, *width]),
            );
        }
        params.set_trainable(true);
        Ok(AdapterState {
            gamma,
            feature_width,
            blocks: blocks.to_vec(),
            params,
        })
    }

    /// Rebuilds the state around loaded parameters, checking names and shapes.
    pub fn from_params(
        blocks: &[(String, usize)],
        feature_width: usize,
        gamma: f64,
        mut params: ParamStore<F>,
    ) -> Result<Self> {
        let expected = Self::new(blocks, feature_width, gamma, 0)?;
        if params.names() != expected.params.names() {
            return Err(Error::Format(format!(
                "adapter parameters {:?}, expected {:?}",
                params.names(),
                expected.params.names()
            )));
        }
        for (name, t) in expected.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "adapter parameter {name} has the wrong shape"
                )));
            }
        }
        params.set_trainable(true);
        Ok(AdapterState {
            gamma,
            feature_width,
            blocks: blocks.to_vec(),
            params,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn blocks(&self) -> &[(String, usize)] {
        &self.blocks
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn gamma_f(&self) -> F {
        F::lit(self.gamma)
    }

    pub fn bind(&self, tape: &mut Tape<F>, block: &str) -> Result<AdapterBlock> {
        Ok(AdapterBlock {
            key: self.params.bind(tape, &format!("{block}.k_prime"))?,
            value: self.params.bind(tape, &format!("{block}.v_prime"))?,
        })
    }

    pub fn cast<G: Real>(&self) -> AdapterState<G> {
        AdapterState {
            gamma: self.gamma,
            feature_width: self.feature_width,
            blocks: self.blocks.clone(),
            params: self.params.cast(),
        }
    }
}

/// Which conditions a training example loses to classifier-free dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropEvent {
    Keep,
    Text,
    Feature,
    Both,
}

impl DropEvent {
    /// Maps one uniform draw to mutually exclusive events of probability
    /// `p` each: `[0, p)` text, `[p, 2p)` feature, `[2p, 3p)` both.
    pub fn from_uniform(u: f64, p: f64) -> Result<Self> {
        if !(0.0..=1.0 / 3.0).contains(&p) {
            return Err(Error::Validation(format!(
                "dropout probability {p} outside [0, 1/3]"
            )));
        }
        Ok(if u < p {
            DropEvent::Text
        } else if u < 2.0 * p {
            DropEvent::Feature
        } else if u < 3.0 * p {
            DropEvent::Both
        } else {
            DropEvent::Keep
        })
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R, p: f64) -> Result<Self> {
        Self::from_uniform(rng.random::<f64>(), p)
    }

    pub fn drops_text(self) -> bool {
        matches!(self, DropEvent::Text | DropEvent::Both)
    }

    pub fn drops_feature(self) -> bool {
        matches!(self, DropEvent::Feature | DropEvent::Both)
    }
}

/// Applies a dropout draw: dropped conditions become zeros of the same shape.
pub fn dropout_conditions<F: Real>(
    text: &Tensor<F>,
    feature: &Tensor<F>,
    u: f64,
    p: f64,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let event = DropEvent::from_uniform(u, p)?;
    let zero = |t: &Tensor<F>| Tensor::zeros(t.shape());
    Ok((
        if event.drops_text() {
            zero(text)
        } else {
            text.clone()
        },
        if event.drops_feature() {
            zero(feature)
        } else {
            feature.clone()
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, [Tensor<f64>; 3]) {
        let mut r = rng::stream(seed, "xattn", 0);
        let z = Tensor::randn(&[6, 4], 1.0, &mut r);
        let c = Tensor::randn(&[3, 5], 1.0, &mut r);
        let cp = Tensor::randn(&[3, 5], 1.0, &mut r);
        let w = [
            Tensor::randn(&[4, 4], 0.5, &mut r),
            Tensor::randn(&[5, 4], 0.5, &mut r),
            Tensor::randn(&[5, 4], 0.5, &mut r),
        ];
        (z, c, cp, w)
    }

    fn run(
        seed: u64,
        gamma: f64,
        kp: Option<&Tensor<f64>>,
        vp: Option<&Tensor<f64>>,
        same: bool,
    ) -> Vec<f64> {
        let (z, c, cp, w) = setup(seed);
        let mut tape = Tape::new();
        let zv = tape.constant(&z);
        let cv = tape.constant(&c);
        let fv = tape.constant(if same { &c } else { &cp });
        let weights = BlockWeights {
            query: tape.constant(&w[0]),
            key: tape.constant(&w[1]),
            value: tape.constant(&w[2]),
        };
        let ad = match (kp, vp) {
            (Some(k), Some(v)) => Some(AdapterBlock {
                key: tape.constant(k),
                value: tape.constant(v),
            }),
            _ => None,
        };
        let out =
            decoupled_cross_attention(&mut tape, zv, cv, Some(fv), &weights, ad.as_ref(), gamma)
                .unwrap();
        tape.value(out).to_vec()
    }

    #[test]
    fn reduces_to_text_attention() {
        let mut r = rng::stream(1, "adapter-test", 0);
        let kp = Tensor::randn(&[5, 4], 0.5, &mut r);
        let vp = Tensor::randn(&[5, 4], 0.5, &mut r);
        let text_only = run(0, 1.0, None, None, false);
        assert_eq!(run(0, 0.0, Some(&kp), Some(&vp), false), text_only);
        let zero = Tensor::zeros(&[5, 4]);
        for gamma in [0.5, 1.0, 3.0] {
            assert_eq!(run(0, gamma, Some(&kp), Some(&zero), false), text_only);
        }
    }

    #[test]
    fn duplicated_stream_doubles_output() {
        let (_, _, _, w) = setup(2);
        let text_only = run(2, 1.0, None, None, true);
        let doubled = run(2, 1.0, Some(&w[1]), Some(&w[2]), true);
        for (a, b) in doubled.iter().zip(&text_only) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_in_gamma() {
        let mut r = rng::stream(3, "adapter-test", 0);
        let kp = Tensor::randn(&[5, 4], 0.5, &mut r);
        let vp = Tensor::randn(&[5, 4], 0.5, &mut r);
        let at = |g| run(3, g, Some(&kp), Some(&vp), false);
        let (a, b, base, sum) = (at(0.7), at(1.9), at(0.0), at(2.6));
        for i in 0..a.len() {
            assert!((a[i] + b[i] - base[i] - sum[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_events() {
        let c = Tensor::<f32>::full(&[3, 2], 1.0);
        let f = Tensor::<f32>::full(&[4, 2], 2.0);
        assert_eq!(
            dropout_conditions(&c, &f, 0.01, 0.0).unwrap(),
            (c.clone(), f.clone())
        );
        let (a, b) = dropout_conditions(&c, &f, 0.12, 0.05).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0) && b.data().iter().all(|&v| v == 0.0));
        assert_eq!((a.shape(), b.shape()), (c.shape(), f.shape()));
        assert_eq!(
            DropEvent::from_uniform(0.03, 0.05).unwrap(),
            DropEvent::Text
        );
        assert_eq!(
            DropEvent::from_uniform(0.07, 0.05).unwrap(),
            DropEvent::Feature
        );
        assert_eq!(DropEvent::from_uniform(0.5, 0.05).unwrap(), DropEvent::Keep);
        assert!(DropEvent::from_uniform(0.5, 0.4).is_err());
        assert!(DropEvent::from_uniform(0.5, -0.1).is_err());
    }
}
