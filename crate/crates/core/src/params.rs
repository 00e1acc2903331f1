use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::Contract(format!("missing parameter {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in &mut self.entries {
            t.requires_grad = trainable;
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Records a parameter on the tape under its own name.
    pub fn bind(&self, tape: &mut Tape<F>, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.get(name)?))
    }
}

/// Layer helpers over a [`ParamStore`]; names follow `<layer>.w`, `<layer>.b`.
pub mod nn {
    use super::*;

    pub fn init_linear<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
        bias: bool,
        rng: &mut R,
    ) {
        let std = gain / (din as f64).sqrt();
        store.insert(format!("{name}.w"), Tensor::randn(&[din, dout], std, rng));
        if bias {
            store.insert(format!("{name}.b"), Tensor::zeros(&[1, dout]));
        }
    }

    pub fn init_conv<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        gain: f64,
        rng: &mut R,
    ) {
        init_linear(store, name, kernel * kernel * cin, cout, gain, true, rng);
    }

    pub fn init_layer_norm<F: Real>(store: &mut ParamStore<F>, name: &str, width: usize) {
        store.insert(format!("{name}.g"), Tensor::full(&[1, width], F::one()));
        store.insert(format!("{name}.b"), Tensor::zeros(&[1, width]));
    }

    pub fn linear<F: Real>(
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        name: &str,
        x: Var,
    ) -> Result<Var> {
        let w = store.bind(tape, &format!("{name}.w"))?;
        let y = tape.matmul(x, w)?;
        let bias = format!("{name}.b");
        if store.contains(&bias) {
            let b = store.bind(tape, &bias)?;
            tape.add_row(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn conv<F: Real>(
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        name: &str,
        x: Var,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let w = store.bind(tape, &format!("{name}.w"))?;
        let rows = store.get(&format!("{name}.w"))?.shape()[0];
        let cin = tape.shape(x)[1];
        let kernel = ((rows / cin) as f64).sqrt().round() as usize;
        let y = tape.conv2d(x, w, height, width, kernel)?;
        let b = store.bind(tape, &format!("{name}.b"))?;
        tape.add_row(y, b)
    }

    pub fn layer_norm<F: Real>(
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        name: &str,
        x: Var,
    ) -> Result<Var> {
        let g = store.bind(tape, &format!("{name}.g"))?;
        let b = store.bind(tape, &format!("{name}.b"))?;
        tape.layer_norm(x, g, b)
    }

    /// `[rows × cols]` matrix with orthonormal rows or columns (whichever is
    /// shorter), times `gain`. Gram-Schmidt on a Gaussian draw.
    pub fn orthogonal<F: Real, R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        gain: f64,
        rng: &mut R,
    ) -> Tensor<F> {
        let (n, len) = (rows.min(cols), rows.max(cols));
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
        while basis.len() < n {
            let mut v: Vec<f64> = (0..len).map(|_| crate::rng::normal(rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        Tensor::from_fn(&[rows, cols], |i| {
            let (r, c) = (i / cols, i % cols);
            let v = if rows <= cols {
                basis[r][c]
            } else {
                basis[c][r]
            };
            F::lit(v * gain)
        })
    }

    /// Multi-head scaled dot-product attention of `q [m×d]` over `k, v [n×d]`.
    ///
    /// Returns the concatenated head outputs `[m×d]` and the head-averaged
    /// attention weights `[m×n]`.
    pub fn attention<F: Real>(
        tape: &mut Tape<F>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let d = tape.shape(q)[1];
        if heads == 0 || !d.is_multiple_of(heads) || tape.shape(k)[1] != d || tape.shape(v)[1] != d
        {
            return Err(Error::dim("attention", tape.shape(q), tape.shape(k)));
        }
        let dh = d / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        let mut weights: Option<Var> = None;
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                    tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                    tape.slice_cols(v, h * dh, (h + 1) * dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let a = tape.softmax_rows(logits);
            outs.push(tape.matmul(a, vh)?);
            weights = Some(match weights {
                None => a,
                Some(w) => tape.add(w, a)?,
            });
        }
        let weights = weights.expect("at least one head");
        let weights = if heads == 1 {
            weights
        } else {
            tape.scale(weights, F::lit(1.0 / heads as f64))
        };
        let out = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        Ok((out, weights))
    }
}
