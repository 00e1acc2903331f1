use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow {
        x: Var,
        row: Var,
        n: usize,
    },
    MulRow {
        x: Var,
        row: Var,
        n: usize,
    },
    Scale {
        x: Var,
        c: F,
    },
    AddScalar(Var),
    Square(Var),
    Gelu(Var),
    SoftmaxRows {
        x: Var,
        n: usize,
    },
    NormalizeRows {
        x: Var,
        n: usize,
        inv_std: Vec<F>,
    },
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
        n: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        width: usize,
        n_in: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
    },
    MeanRows {
        x: Var,
        m: usize,
        n: usize,
    },
    SumAll(Var),
    MaskedSum {
        x: Var,
        mask: Vec<bool>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        images: usize,
        cols: Vec<F>,
        cout: usize,
    },
    AvgPool2 {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    Upsample2 {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
        m: usize,
        n: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<F>,
    },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records executed primitive ops in execution order.
///
/// A tape is single-owner; [`Tape::backward`] consumes it.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    names: Vec<(Var, String)>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an untracked leaf regardless of the tensor's flag.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Records a named leaf; gradients can later be looked up by name.
    pub fn param(&mut self, name: &str, t: &Tensor<F>) -> Var {
        let v = self.leaf(t);
        if t.requires_grad {
            self.names.push((v, name.to_string()));
        }
        v
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = kernels::gemm(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let value = kernels::transpose(&self.nodes[a.0].value, rows, cols);
        Ok(self.push(
            vec![cols, rows],
            value,
            Op::Transpose { a, rows, cols },
            &[a],
        ))
    }

    fn zip(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let (_, n) = self.dims(x);
        let rs = &self.nodes[row.0].shape;
        let (rr, rn) = dims2(rs);
        if rr != 1 || rn != n {
            return Err(Error::dim(op, &self.nodes[x.0].shape, rs));
        }
        Ok(n)
    }

    /// Adds a `[n]` or `[1×n]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row("add_row", x, row)?;
        let r = &self.nodes[row.0].value;
        let value = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % n])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, value, Op::AddRow { x, row, n }, &[x, row]))
    }

    /// Multiplies every row of `x` elementwise by a `[n]` or `[1×n]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row("mul_row", x, row)?;
        let r = &self.nodes[row.0].value;
        let value = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v * r[i % n])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, value, Op::MulRow { x, row, n }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::AddScalar(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| v * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Square(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| gelu(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Gelu(x), &[x])
    }

    /// Row-wise softmax, stabilised by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, n) = self.dims(x);
        let mut value = self.nodes[x.0].value.clone();
        for row in value.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::SoftmaxRows { x, n }, &[x])
    }

    /// Per-row standardisation `(x − mean) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: F) -> Var {
        let (m, n) = self.dims(x);
        let src = &self.nodes[x.0].value;
        let mut value = vec![F::zero(); m * n];
        let mut inv_std = Vec::with_capacity(m);
        let nf = F::from_usize(n).expect("usize");
        for (row, out) in src.chunks(n).zip(value.chunks_mut(n)) {
            let mean = kernels::sum(row) / nf;
            let var = row
                .iter()
                .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nf;
            let inv = F::one() / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::NormalizeRows { x, n, inv_std }, &[x])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let h = self.normalize_rows(x, F::lit(1e-5));
        let h = self.mul_row(h, gamma)?;
        self.add_row(h, beta)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.nodes[x.0].shape, shape));
        }
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// Rows `start..end` of a 2-D value.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > m {
            return Err(Error::Contract(format!(
                "row slice {start}..{end} of {m} rows"
            )));
        }
        let value = self.nodes[x.0].value[start * n..end * n].to_vec();
        Ok(self.push(
            vec![end - start, n],
            value,
            Op::SliceRows { x, start, n },
            &[x],
        ))
    }

    /// Columns `start..end` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > n {
            return Err(Error::Contract(format!(
                "column slice {start}..{end} of {n} columns"
            )));
        }
        let width = end - start;
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(m * width);
        for r in 0..m {
            value.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        Ok(self.push(
            vec![m, width],
            value,
            Op::SliceCols {
                x,
                start,
                width,
                n_in: n,
            },
            &[x],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("empty concat".into()))?;
        let (m, _) = self.dims(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::dim(
                    "concat_cols",
                    &self.nodes[first.0].shape,
                    &self.nodes[p.0].shape,
                ));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[p.0].value[r * w..(r + 1) * w]);
            }
        }
        let op = Op::ConcatCols {
            parts: parts.iter().copied().zip(widths).collect(),
        };
        Ok(self.push(vec![m, total], value, op, parts))
    }

    /// Mean over rows: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let src = &self.nodes[x.0].value;
        let mut value = vec![F::zero(); n];
        for row in src.chunks(n) {
            kernels::add_into(&mut value, row);
        }
        let mf = F::from_usize(m).expect("usize");
        value.iter_mut().for_each(|v| *v = *v / mf);
        self.push(vec![1, n], value, Op::MeanRows { x, m, n }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = vec![kernels::sum(&self.nodes[x.0].value)];
        self.push(vec![1], value, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = F::from_usize(self.nodes[x.0].value.len()).expect("usize");
        let s = self.sum_all(x);
        self.scale(s, F::one() / n)
    }

    /// Sum of the entries where `mask` is set.
    pub fn masked_sum(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if mask.len() != src.len() {
            return Err(Error::dim(
                "masked_sum",
                &self.nodes[x.0].shape,
                &[mask.len()],
            ));
        }
        let value = vec![src
            .iter()
            .zip(mask)
            .fold(F::zero(), |a, (&v, &m)| if m { a + v } else { a })];
        Ok(self.push(
            vec![1],
            value,
            Op::MaskedSum {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// Same-padded stride-1 convolution with a `[k·k·cin × cout]` kernel.
    ///
    /// `x` is a stack of `[h·w × cin]` maps, one image after another.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        height: usize,
        width: usize,
        kernel: usize,
    ) -> Result<Var> {
        let (p, cin) = self.dims(x);
        let ws = self.nodes[w.0].shape.clone();
        let hw = height * width;
        if hw == 0
            || p % hw != 0
            || ws.len() != 2
            || ws[0] != kernel * kernel * cin
            || kernel.is_multiple_of(2)
        {
            return Err(Error::dim("conv2d", &self.nodes[x.0].shape, &ws));
        }
        let cout = ws[1];
        let geom = ConvGeom {
            height,
            width,
            kernel,
            cin,
        };
        let images = p / hw;
        let mut cols = Vec::with_capacity(p * geom.patch_len());
        for img in self.nodes[x.0].value.chunks(hw * cin) {
            cols.extend(kernels::im2col(img, geom));
        }
        let value = kernels::gemm(&cols, &self.nodes[w.0].value, p, geom.patch_len(), cout);
        let cols = if self.nodes[w.0].requires_grad {
            cols
        } else {
            Vec::new()
        };
        let op = Op::Conv2d {
            x,
            w,
            geom,
            images,
            cols,
            cout,
        };
        Ok(self.push(vec![p, cout], value, op, &[x, w]))
    }

    fn image_stack(&self, op: &'static str, x: Var, h: usize, w: usize) -> Result<(usize, usize)> {
        let (p, c) = self.dims(x);
        if h * w == 0 || p % (h * w) != 0 {
            return Err(Error::dim(op, &self.nodes[x.0].shape, &[h, w]));
        }
        Ok((p / (h * w), c))
    }

    /// 2×2 average pooling of a stack of `[h·w × c]` maps.
    pub fn avg_pool2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (images, c) = self.image_stack("avg_pool2", x, h, w)?;
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(Error::dim("avg_pool2", &self.nodes[x.0].shape, &[h, w]));
        }
        let mut value = Vec::with_capacity(images * h * w * c / 4);
        for img in self.nodes[x.0].value.chunks(h * w * c) {
            value.extend(kernels::avg_pool2(img, h, w, c));
        }
        Ok(self.push(
            vec![images * h * w / 4, c],
            value,
            Op::AvgPool2 { x, h, w, c },
            &[x],
        ))
    }

    /// Nearest-neighbour 2× upsampling of a stack of `[h·w × c]` maps.
    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (images, c) = self.image_stack("upsample2", x, h, w)?;
        let mut value = Vec::with_capacity(images * h * w * c * 4);
        for img in self.nodes[x.0].value.chunks(h * w * c) {
            value.extend(kernels::upsample2(img, h, w, c));
        }
        Ok(self.push(
            vec![images * h * w * 4, c],
            value,
            Op::Upsample2 { x, h, w, c },
            &[x],
        ))
    }

    /// Rows of `x` picked by `index`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if index.is_empty() || index.iter().any(|&i| i >= m) {
            return Err(Error::Contract(format!(
                "gather index out of range for {m} rows"
            )));
        }
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(index.len() * n);
        for &i in index {
            value.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
            m,
            n,
        };
        Ok(self.push(vec![index.len(), n], value, op, &[x]))
    }

    /// Stacks 2-D values with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("empty concat".into()))?;
        let (_, n) = self.dims(first);
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::dim(
                    "concat_rows",
                    &self.nodes[first.0].shape,
                    &self.nodes[p.0].shape,
                ));
            }
            rows += pm;
        }
        let mut value = Vec::with_capacity(rows * n);
        for &p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let op = Op::ConcatRows {
            parts: parts.to_vec(),
        };
        Ok(self.push(vec![rows, n], value, op, parts))
    }

    /// Mean binary cross-entropy of logits against fixed targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[F]) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if targets.len() != src.len() {
            return Err(Error::dim(
                "bce_with_logits",
                &self.nodes[x.0].shape,
                &[targets.len()],
            ));
        }
        let total = src
            .iter()
            .zip(targets)
            .fold(F::zero(), |a, (&z, &y)| a + softplus(z) - y * z);
        let n = F::from_usize(src.len()).expect("usize");
        let op = Op::BceWithLogits {
            x,
            targets: targets.to_vec(),
        };
        Ok(self.push(vec![1], vec![total / n], op, &[x]))
    }

    /// Reverse pass from a scalar `loss`, visiting ops in exact reverse
    /// execution order. Gradients reaching a value along several paths are
    /// summed.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let Tape { nodes, names } = self;
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves = BTreeMap::new();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let mut acc = |v: Var, contrib: Vec<F>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => kernels::add_into(existing, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let rg = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    leaves.insert(Var(i), g);
                }
                &Op::MatMul { a, b, m, k, n } => {
                    if rg(a) {
                        let mut da = vec![F::zero(); m * k];
                        kernels::gemm_nt_acc(&g, val(b), &mut da, m, n, k);
                        acc(a, da);
                    }
                    if rg(b) {
                        let mut db = vec![F::zero(); k * n];
                        kernels::gemm_tn_acc(val(a), &g, &mut db, m, k, n);
                        acc(b, db);
                    }
                }
                &Op::Transpose { a, rows, cols } => acc(a, kernels::transpose(&g, cols, rows)),
                &Op::Add(a, b) => {
                    if rg(b) {
                        acc(b, g.clone());
                    }
                    acc(a, g);
                }
                &Op::Sub(a, b) => {
                    if rg(b) {
                        acc(b, g.iter().map(|&v| -v).collect());
                    }
                    acc(a, g);
                }
                &Op::Mul(a, b) => {
                    if rg(a) {
                        acc(a, g.iter().zip(val(b)).map(|(&g, &y)| g * y).collect());
                    }
                    if rg(b) {
                        acc(b, g.iter().zip(val(a)).map(|(&g, &x)| g * x).collect());
                    }
                }
                &Op::Div(a, b) => {
                    if rg(a) {
                        acc(a, g.iter().zip(val(b)).map(|(&g, &y)| g / y).collect());
                    }
                    if rg(b) {
                        let d = g
                            .iter()
                            .zip(val(a).iter().zip(val(b)))
                            .map(|(&g, (&x, &y))| -g * x / (y * y))
                            .collect();
                        acc(b, d);
                    }
                }
                &Op::AddRow { x, row, n } => {
                    if rg(row) {
                        acc(row, col_sums(&g, n));
                    }
                    acc(x, g);
                }
                &Op::MulRow { x, row, n } => {
                    if rg(row) {
                        let gx: Vec<F> = g.iter().zip(val(x)).map(|(&g, &v)| g * v).collect();
                        acc(row, col_sums(&gx, n));
                    }
                    if rg(x) {
                        let r = val(row);
                        acc(
                            x,
                            g.iter().enumerate().map(|(i, &g)| g * r[i % n]).collect(),
                        );
                    }
                }
                &Op::Scale { x, c } => acc(x, g.iter().map(|&v| v * c).collect()),
                &Op::AddScalar(x) => acc(x, g),
                &Op::Square(x) => {
                    let two = F::lit(2.0);
                    acc(
                        x,
                        g.iter().zip(val(x)).map(|(&g, &v)| two * v * g).collect(),
                    );
                }
                &Op::Gelu(x) => acc(
                    x,
                    g.iter()
                        .zip(val(x))
                        .map(|(&g, &v)| g * gelu_grad(v))
                        .collect(),
                ),
                &Op::SoftmaxRows { x, n } => {
                    let y = &node.value;
                    let mut dx = vec![F::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot = yr.iter().zip(gr).fold(F::zero(), |a, (&y, &g)| a + y * g);
                        for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                    acc(x, dx);
                }
                Op::NormalizeRows { x, n, inv_std } => {
                    let (x, n) = (*x, *n);
                    let y = &node.value;
                    let nf = F::from_usize(n).expect("usize");
                    let mut dx = vec![F::zero(); y.len()];
                    for (r, ((yr, gr), dr)) in y
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(dx.chunks_mut(n))
                        .enumerate()
                    {
                        let mg = kernels::sum(gr) / nf;
                        let mgy = yr.iter().zip(gr).fold(F::zero(), |a, (&y, &g)| a + y * g) / nf;
                        for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = inv_std[r] * (g - mg - y * mgy);
                        }
                    }
                    acc(x, dx);
                }
                &Op::Reshape(x) => acc(x, g),
                &Op::SliceRows { x, start, n } => {
                    let mut dx = vec![F::zero(); val(x).len()];
                    dx[start * n..start * n + g.len()].copy_from_slice(&g);
                    acc(x, dx);
                }
                &Op::SliceCols {
                    x,
                    start,
                    width,
                    n_in,
                } => {
                    let mut dx = vec![F::zero(); val(x).len()];
                    for (r, gr) in g.chunks(width).enumerate() {
                        dx[r * n_in + start..r * n_in + start + width].copy_from_slice(gr);
                    }
                    acc(x, dx);
                }
                Op::ConcatCols { parts } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut off = 0;
                    for &(p, w) in parts {
                        if rg(p) {
                            let mut dp = Vec::with_capacity(val(p).len());
                            for gr in g.chunks(total) {
                                dp.extend_from_slice(&gr[off..off + w]);
                            }
                            acc(p, dp);
                        }
                        off += w;
                    }
                }
                &Op::MeanRows { x, m, n } => {
                    let mf = F::from_usize(m).expect("usize");
                    let row: Vec<F> = g.iter().map(|&v| v / mf).collect();
                    let mut dx = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        dx.extend_from_slice(&row);
                    }
                    acc(x, dx);
                }
                &Op::SumAll(x) => acc(x, vec![g[0]; val(x).len()]),
                Op::MaskedSum { x, mask } => {
                    acc(
                        *x,
                        mask.iter()
                            .map(|&m| if m { g[0] } else { F::zero() })
                            .collect(),
                    );
                }
                Op::Conv2d {
                    x,
                    w,
                    geom,
                    images,
                    cols,
                    cout,
                } => {
                    let (x, w, geom, cout) = (*x, *w, *geom, *cout);
                    let (p, pl) = (geom.positions() * images, geom.patch_len());
                    if rg(w) {
                        let mut dw = vec![F::zero(); pl * cout];
                        kernels::gemm_tn_acc(cols, &g, &mut dw, p, pl, cout);
                        acc(w, dw);
                    }
                    if rg(x) {
                        let mut dcols = vec![F::zero(); p * pl];
                        kernels::gemm_nt_acc(&g, val(w), &mut dcols, p, cout, pl);
                        let hw = geom.positions();
                        let mut dx = vec![F::zero(); p * geom.cin];
                        for (dc, d) in dcols.chunks(hw * pl).zip(dx.chunks_mut(hw * geom.cin)) {
                            kernels::col2im_acc(dc, geom, d);
                        }
                        acc(x, dx);
                    }
                }
                &Op::AvgPool2 { x, h, w, c } => {
                    let ow = w / 2;
                    let quarter = F::lit(0.25);
                    let mut dx = vec![F::zero(); val(x).len()];
                    for (gi, di) in g.chunks(h * w * c / 4).zip(dx.chunks_mut(h * w * c)) {
                        for y in 0..h {
                            for xx in 0..w {
                                let s = ((y / 2) * ow + xx / 2) * c;
                                for ch in 0..c {
                                    di[(y * w + xx) * c + ch] = gi[s + ch] * quarter;
                                }
                            }
                        }
                    }
                    acc(x, dx);
                }
                &Op::Upsample2 { x, h, w, c } => {
                    let ow = 2 * w;
                    let mut dx = vec![F::zero(); val(x).len()];
                    for (gi, di) in g.chunks(4 * h * w * c).zip(dx.chunks_mut(h * w * c)) {
                        for y in 0..2 * h {
                            for xx in 0..ow {
                                let d = ((y / 2) * w + xx / 2) * c;
                                kernels::add_into(&mut di[d..d + c], &gi[(y * ow + xx) * c..][..c]);
                            }
                        }
                    }
                    acc(x, dx);
                }
                Op::GatherRows { x, index, m, n } => {
                    let n = *n;
                    let mut dx = vec![F::zero(); m * n];
                    for (r, &i) in index.iter().enumerate() {
                        kernels::add_into(&mut dx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                    acc(*x, dx);
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).len();
                        if rg(p) {
                            acc(p, g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                }
                Op::BceWithLogits { x, targets } => {
                    let n = F::from_usize(targets.len()).expect("usize");
                    let scale = g[0] / n;
                    let d = val(*x)
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                        .collect();
                    acc(*x, d);
                }
            }
        }
        Ok(Gradients { leaves, names })
    }
}

/// Gradients of every reachable leaf that requires them.
#[derive(Debug)]
pub struct Gradients<F> {
    leaves: BTreeMap<Var, Vec<F>>,
    names: Vec<(Var, String)>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf. `None` when the leaf is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    /// Gradient of a leaf, zeros if it received none.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<F> {
        self.get(v)
            .map(<[F]>::to_vec)
            .unwrap_or_else(|| vec![F::zero(); len])
    }

    /// Gradients of named parameters, summed over repeated bindings.
    pub fn named(&self) -> BTreeMap<String, Vec<F>> {
        let mut out: BTreeMap<String, Vec<F>> = BTreeMap::new();
        for (v, name) in &self.names {
            let Some(g) = self.leaves.get(v) else {
                continue;
            };
            match out.get_mut(name) {
                Some(existing) => kernels::add_into(existing, g),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    /// Stores a leaf's gradient into the tensor it was recorded from.
    pub fn write_into(&self, v: Var, t: &mut Tensor<F>) -> Result<()> {
        t.set_grad(self.get_or_zeros(v, t.len()))
    }
}

fn col_sums<F: Real>(g: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n];
    for row in g.chunks(n) {
        kernels::add_into(&mut out, row);
    }
    out
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Real>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::lit(GELU_C) * (F::one() + F::lit(3.0 * GELU_A) * x * x);
    F::lit(0.5) * (F::one() + t) + F::lit(0.5) * x * (F::one() - t * t) * du
}

pub(crate) fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Real>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}
