//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough saved state to run its backward rule. Nodes are only ever
//! appended, so the node list is already in topological order and
//! [`Graph::backward`] just walks it in reverse. A fresh graph is built for
//! every forward pass.

use crate::error::{Error, Result};
use crate::tensor::{gather_rows, inverse_permutation, numel, permute_data, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    /// `b`'s shape is a suffix of `a`'s; `b` is tiled over the leading axes.
    AddSuffix(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    DepthwiseConv {
        x: Var,
        kernel: Var,
        dims: ConvDims,
    },
    Gather {
        x: Var,
        row_len: usize,
        index: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        blocks: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        src_block: usize,
        offset: usize,
        block: usize,
    },
    Mean {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        classes: usize,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    ksize: usize,
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `tensor` as a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        let mut value = tensor;
        value.clear_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let value = tensor.with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that always receives a gradient.
    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        let value = tensor.with_requires_grad(true);
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Shapes of every recorded node, in tape order.
    pub fn node_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.value.shape())
    }

    fn out(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("kernel produced consistent shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("add: shapes {sa:?} and {sb:?} differ")));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Self::out(sa, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `a + b` where `b.shape` equals the trailing axes of `a.shape` (bias, positional table, mask).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!(
                "add_broadcast: {sb:?} is not a trailing sub-shape of {sa:?}"
            )));
        }
        let bd = self.value(b).data();
        let period = bd.len();
        let data =
            self.value(a).data().iter().enumerate().map(|(i, &x)| x + bd[i % period]).collect();
        let value = Self::out(sa, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddSuffix(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("mul: shapes {sa:?} and {sb:?} differ")));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Self::out(sa, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across the batch
    /// axes of `a`) or `[.., k, n]` with the same batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::shape(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_rhs = batch_b.is_empty();
        if !shared_rhs && batch_a != batch_b {
            return Err(mismatch());
        }
        let batch = numel(batch_a);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut c = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a_blk = &ad[bi * m * k..(bi + 1) * m * k];
            let b_blk = if shared_rhs { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
            gemm_nn(a_blk, b_blk, &mut c[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let value = Self::out(&shape, c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, batch, m, k, n, shared_rhs }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Self::out(&shape, out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or_else(|| Error::shape("layer_norm on rank-0 tensor"))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::shape(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{dim}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / dim;
        let n = T::from_f64(dim as f64);
        let mut normalized = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..dim {
                let xh = (row[c] - mean) * is;
                normalized[r * dim + c] = xh;
                out[r * dim + c] = xh * g[c] + b[c];
            }
        }
        let value = Self::out(&shape, out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, normalized, inv_std }, rg))
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF in erf form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Per-channel 2-D convolution on a channels-last `[B, H, W, C]` input with
    /// a `[k, k, C]` kernel, stride 1 and zero padding that preserves `H` and `W`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 4 || sk.len() != 3 {
            return Err(Error::shape(format!(
                "depthwise_conv2d expects [B,H,W,C] and [k,k,C], got {sx:?} and {sk:?}"
            )));
        }
        if sk[0] != sk[1] || sk[0].is_multiple_of(2) {
            return Err(Error::shape(format!("depthwise kernel must be square and odd, got {sk:?}")));
        }
        if sk[2] != sx[3] {
            return Err(Error::shape(format!(
                "depthwise kernel has {} channels but input has {}",
                sk[2], sx[3]
            )));
        }
        let dims = ConvDims { batch: sx[0], height: sx[1], width: sx[2], channels: sx[3], ksize: sk[0] };
        let out = dwconv_forward(self.value(x).data(), self.value(kernel).data(), dims);
        let value = Self::out(&sx, out);
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(value, Op::DepthwiseConv { x, kernel, dims }, rg))
    }

    /// Views `x` as rows of `row_len` elements and picks rows by `index`.
    pub fn gather_rows(&mut self, x: Var, row_len: usize, index: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let data = gather_rows(self.value(x).data(), row_len, &index)?;
        if numel(out_shape) != data.len() {
            return Err(Error::shape(format!(
                "gather_rows: {} gathered elements do not fit {out_shape:?}",
                data.len()
            )));
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather { x, row_len, index }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_elsewhere = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_elsewhere {
                return Err(Error::shape(format!("concat: {s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let blocks: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &blk) in inputs.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(v).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Self::out(&shape, out);
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), outer, blocks }, rg))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!("slice {start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src_block = shape[axis] * inner;
        let block = len * inner;
        let offset = start * inner;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * block);
        for o in 0..outer {
            out.extend_from_slice(&src[o * src_block + offset..o * src_block + offset + block]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = Self::out(&oshape, out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Slice { x, outer, src_block, offset, block }, rg))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let src = self.value(x).data();
        let n = T::from_f64(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[o * len * inner + j * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        let mut oshape = shape;
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let value = Self::out(&oshape, out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean { x, outer, len, inner }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Weighted mean of `-log softmax(logits)[label]` over the batch.
    ///
    /// `class_weights`, when given, weights each sample by the weight of its
    /// label and normalizes by the total weight.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: Option<&[T]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!("label {bad} out of range for {classes} classes")));
        }
        if let Some(w) = class_weights {
            if w.len() != classes {
                return Err(Error::config(format!("{} class weights for {classes} classes", w.len())));
            }
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut weights = Vec::with_capacity(batch);
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
            let w = class_weights.map_or(T::one(), |w| w[label]);
            weights.push(w);
            loss += w * (lse - row[label]);
        }
        let total: T = weights.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::config("class weights sum to zero over the batch"));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        let value = Tensor::scalar(loss / total);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, classes, labels: labels.to_vec(), weights, probs },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate additively over
    /// every path; results are read with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::AddSuffix(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    let p = s.len();
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % p] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(bv).for_each(|((d, &gv), &y)| *d += gv * y));
                acc(*b, &mut |s| s.iter_mut().zip(g).zip(av).for_each(|((d, &gv), &x)| *d += gv * x));
            }
            Op::Scale(a, f) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *f)),
            Op::MatMul { a, b, batch, m, k, n, shared_rhs } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for bi in 0..*batch {
                        let b_blk = if *shared_rhs { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        gemm_nt(&g[bi * m * n..(bi + 1) * m * n], b_blk, &mut s[bi * m * k..(bi + 1) * m * k], m, n, k);
                    }
                });
                acc(*b, &mut |s| {
                    for bi in 0..*batch {
                        let dst = if *shared_rhs { &mut s[..] } else { &mut s[bi * k * n..(bi + 1) * k * n] };
                        gemm_tn(&av[bi * m * k..(bi + 1) * m * k], &g[bi * m * n..(bi + 1) * m * n], dst, m, k, n);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Permute(a, axes) => {
                let out_shape = nodes[idx].value.shape();
                let (_, back) = permute_data(out_shape, g, &inverse_permutation(axes)).expect("valid permutation");
                acc(*a, &mut |s| add_into(s, &back));
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = nodes[idx].value.data();
                acc(*x, &mut |s| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
                let gv = val(*gamma);
                let dim = gv.len();
                let rows = inv_std.len();
                acc(*x, &mut |s| {
                    let n = T::from_f64(dim as f64);
                    for r in 0..rows {
                        let xh = &normalized[r * dim..(r + 1) * dim];
                        let gr = &g[r * dim..(r + 1) * dim];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..dim {
                            let d = gr[c] * gv[c];
                            sum_d += d;
                            sum_dx += d * xh[c];
                        }
                        for c in 0..dim {
                            let d = gr[c] * gv[c];
                            s[r * dim + c] += inv_std[r] / n * (n * d - sum_d - xh[c] * sum_dx);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (i, (&gv, &xh)) in g.iter().zip(normalized).enumerate() {
                        s[i % dim] += gv * xh;
                    }
                });
                acc(*beta, &mut |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % dim] += gv;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| s.iter_mut().zip(g).zip(xv).for_each(|((d, &gv), &x)| *d += gv * gelu_grad(x)));
            }
            Op::DepthwiseConv { x, kernel, dims } => {
                let (xv, kv) = (val(*x), val(*kernel));
                if wants(*x) || wants(*kernel) {
                    let (dx, dk) = dwconv_backward(xv, kv, g, *dims);
                    acc(*x, &mut |s| add_into(s, &dx));
                    acc(*kernel, &mut |s| add_into(s, &dk));
                }
            }
            Op::Gather { x, row_len, index } => acc(*x, &mut |s| {
                for (j, &r) in index.iter().enumerate() {
                    let src = &g[j * row_len..(j + 1) * row_len];
                    add_into(&mut s[r * row_len..(r + 1) * row_len], src);
                }
            }),
            Op::Concat { inputs, outer, blocks } => {
                let stride: usize = blocks.iter().sum();
                let mut off = 0;
                for (&v, &blk) in inputs.iter().zip(blocks) {
                    acc(v, &mut |s| {
                        for o in 0..*outer {
                            add_into(&mut s[o * blk..(o + 1) * blk], &g[o * stride + off..o * stride + off + blk]);
                        }
                    });
                    off += blk;
                }
            }
            Op::Slice { x, outer, src_block, offset, block } => acc(*x, &mut |s| {
                for o in 0..*outer {
                    let dst = &mut s[o * src_block + offset..o * src_block + offset + block];
                    add_into(dst, &g[o * block..(o + 1) * block]);
                }
            }),
            Op::Mean { x, outer, len, inner } => acc(*x, &mut |s| {
                let n = T::from_f64(*len as f64);
                for o in 0..*outer {
                    for j in 0..*len {
                        for i in 0..*inner {
                            s[o * len * inner + j * inner + i] += g[o * inner + i] / n;
                        }
                    }
                }
            }),
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::CrossEntropy { logits, classes, labels, weights, probs } => acc(*logits, &mut |s| {
                for (r, (&label, &w)) in labels.iter().zip(weights).enumerate() {
                    for c in 0..*classes {
                        let onehot = if c == label { T::one() } else { T::zero() };
                        s[r * classes + c] += g[0] * w * (probs[r * classes + c] - onehot);
                    }
                }
            }),
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

/// `c += a · b` with `a: [m,k]`, `b: [k,n]`.
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += aip * b);
        }
    }
}

/// `c += a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: T = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c += aᵀ · b` with `a: [m,k]`, `b: [m,n]`, `c: [k,n]`.
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += aip * b);
        }
    }
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn dwconv_forward<T: Scalar>(x: &[T], kernel: &[T], d: ConvDims) -> Vec<T> {
    let ConvDims { batch, height, width, channels, ksize } = d;
    let pad = (ksize / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for i in 0..height {
            for j in 0..width {
                let o = ((b * height + i) * width + j) * channels;
                for u in 0..ksize {
                    let si = i as isize + u as isize - pad;
                    if si < 0 || si >= height as isize {
                        continue;
                    }
                    for v in 0..ksize {
                        let sj = j as isize + v as isize - pad;
                        if sj < 0 || sj >= width as isize {
                            continue;
                        }
                        let s = ((b * height + si as usize) * width + sj as usize) * channels;
                        let kk = (u * ksize + v) * channels;
                        for c in 0..channels {
                            out[o + c] += x[s + c] * kernel[kk + c];
                        }
                    }
                }
            }
        }
    }
    out
}

fn dwconv_backward<T: Scalar>(x: &[T], kernel: &[T], g: &[T], d: ConvDims) -> (Vec<T>, Vec<T>) {
    let ConvDims { batch, height, width, channels, ksize } = d;
    let pad = (ksize / 2) as isize;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    for b in 0..batch {
        for i in 0..height {
            for j in 0..width {
                let o = ((b * height + i) * width + j) * channels;
                for u in 0..ksize {
                    let si = i as isize + u as isize - pad;
                    if si < 0 || si >= height as isize {
                        continue;
                    }
                    for v in 0..ksize {
                        let sj = j as isize + v as isize - pad;
                        if sj < 0 || sj >= width as isize {
                            continue;
                        }
                        let s = ((b * height + si as usize) * width + sj as usize) * channels;
                        let kk = (u * ksize + v) * channels;
                        for c in 0..channels {
                            dx[s + c] += g[o + c] * kernel[kk + c];
                            dk[kk + c] += g[o + c] * x[s + c];
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}
