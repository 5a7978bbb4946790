//! Shifted-window multi-head self-attention.
//!
//! Tokens on an `H_p x W_p` grid are grouped into non-overlapping `M x M`
//! windows and attend only within their window. Odd blocks first roll the
//! grid by `(-s, -s)` with `s = M / 2`, so windows straddle the previous
//! block's window borders. Tokens that wrapped around during the roll are
//! not spatial neighbours of the rest of their window; an additive mask
//! keeps them from attending to each other.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, BoundParams, ParamId, ParamStore};
use crate::patch_embedding::TokenSequence;
use crate::tensor::{Scalar, Tensor};

/// Additive mask value for blocked pairs.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<H> {
    pub w_q: H,
    pub w_k: H,
    pub w_v: H,
    pub w_o: H,
}

impl AttentionParams<ParamId> {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, prefix: &str, dim: usize) -> Result<Self> {
        let mut w = |name: &str| store.insert(format!("{prefix}.{name}"), glorot_uniform(rng, &[dim, dim], dim, dim));
        Ok(Self { w_q: w("w_q")?, w_k: w("w_k")?, w_v: w("w_v")?, w_o: w("w_o")? })
    }

    pub fn bind(&self, bound: &BoundParams) -> AttentionParams<Var> {
        AttentionParams {
            w_q: bound.var(self.w_q),
            w_k: bound.var(self.w_k),
            w_v: bound.var(self.w_v),
            w_o: bound.var(self.w_o),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams<H> {
    pub gamma: H,
    pub beta: H,
}

impl LayerNormParams<ParamId> {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn bind(&self, bound: &BoundParams) -> LayerNormParams<Var> {
        LayerNormParams { gamma: bound.var(self.gamma), beta: bound.var(self.beta) }
    }
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, p: &LayerNormParams<Var>, eps: f64) -> Result<Var> {
    g.layer_norm(x, p.gamma, p.beta, T::from_f64(eps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub shift: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl WindowSpec {
    pub fn new(window: usize, shift: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        let spec = Self { window, shift, grid_h, grid_w };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.window;
        if m == 0 || !self.grid_h.is_multiple_of(m) || !self.grid_w.is_multiple_of(m) {
            return Err(Error::config(format!(
                "grid {}x{} is not divisible by window {m}",
                self.grid_h, self.grid_w
            )));
        }
        if self.shift != 0 && self.shift != m / 2 {
            return Err(Error::config(format!("shift {} must be 0 or {}", self.shift, m / 2)));
        }
        Ok(())
    }

    pub fn num_windows(&self) -> usize {
        (self.grid_h / self.window) * (self.grid_w / self.window)
    }

    pub fn window_tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Token gather index that regroups `batch` grids into windows.
pub fn partition_index(spec: &WindowSpec, batch: usize) -> Vec<usize> {
    let (m, h, w) = (spec.window, spec.grid_h, spec.grid_w);
    let mut index = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for wy in 0..h / m {
            for wx in 0..w / m {
                for iy in 0..m {
                    for ix in 0..m {
                        index.push(b * h * w + (wy * m + iy) * w + wx * m + ix);
                    }
                }
            }
        }
    }
    index
}

/// Gather index for rolling each grid by `(-s, -s)` (`forward`) or `(+s, +s)`.
pub fn roll_index(h: usize, w: usize, s: usize, batch: usize, forward: bool) -> Vec<usize> {
    let mut index = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = if forward { ((i + s) % h, (j + s) % w) } else { ((i + h - s % h) % h, (j + w - s % w) % w) };
                index.push(b * h * w + si * w + sj);
            }
        }
    }
    index
}

fn inverse(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (j, &i) in index.iter().enumerate() {
        inv[i] = j;
    }
    inv
}

fn token_dims(shape: &[usize], spec: &WindowSpec) -> Result<(usize, usize)> {
    match shape {
        [b, t, d] if *t == spec.num_tokens() => Ok((*b, *d)),
        _ => Err(Error::shape(format!(
            "tokens {shape:?} do not cover a {}x{} grid",
            spec.grid_h, spec.grid_w
        ))),
    }
}

/// `[B, H_p*W_p, d] -> [B*nW, M*M, d]`.
pub fn window_partition<T: Scalar>(g: &mut Graph<T>, x: Var, spec: &WindowSpec) -> Result<Var> {
    spec.validate()?;
    let (b, d) = token_dims(g.shape(x), spec)?;
    let index = partition_index(spec, b);
    g.gather_rows(x, d, index, &[b * spec.num_windows(), spec.window_tokens(), d])
}

/// `[B*nW, M*M, d] -> [B, H_p*W_p, d]`.
pub fn window_reverse<T: Scalar>(g: &mut Graph<T>, windows: Var, spec: &WindowSpec) -> Result<Var> {
    spec.validate()?;
    let shape = g.shape(windows).to_vec();
    let [bw, t, d] = shape[..] else {
        return Err(Error::shape(format!("expected windows [B*nW, M*M, d], got {shape:?}")));
    };
    if t != spec.window_tokens() || bw % spec.num_windows() != 0 {
        return Err(Error::shape(format!("windows {shape:?} do not match {spec:?}")));
    }
    let b = bw / spec.num_windows();
    let index = inverse(&partition_index(spec, b));
    g.gather_rows(windows, d, index, &[b, spec.num_tokens(), d])
}

pub fn cyclic_shift<T: Scalar>(g: &mut Graph<T>, x: Var, spec: &WindowSpec) -> Result<Var> {
    roll(g, x, spec, true)
}

pub fn cyclic_unshift<T: Scalar>(g: &mut Graph<T>, x: Var, spec: &WindowSpec) -> Result<Var> {
    roll(g, x, spec, false)
}

fn roll<T: Scalar>(g: &mut Graph<T>, x: Var, spec: &WindowSpec, forward: bool) -> Result<Var> {
    let (b, d) = token_dims(g.shape(x), spec)?;
    if spec.shift == 0 {
        return Ok(x);
    }
    let index = roll_index(spec.grid_h, spec.grid_w, spec.shift, b, forward);
    g.gather_rows(x, d, index, &[b, spec.num_tokens(), d])
}

/// Plain-tensor versions of the token regrouping, for inspection and export.
pub mod layout {
    use super::*;

    pub fn partition<T: Scalar>(x: &Tensor<T>, spec: &WindowSpec) -> Result<Tensor<T>> {
        let (b, d) = token_dims(x.shape(), spec)?;
        x.gather_rows(d, &partition_index(spec, b), &[b * spec.num_windows(), spec.window_tokens(), d])
    }

    pub fn reverse<T: Scalar>(x: &Tensor<T>, spec: &WindowSpec) -> Result<Tensor<T>> {
        let [bw, _, d] = x.shape() else {
            return Err(Error::shape("expected [B*nW, M*M, d]"));
        };
        let b = bw / spec.num_windows();
        x.gather_rows(*d, &inverse(&partition_index(spec, b)), &[b, spec.num_tokens(), *d])
    }

    pub fn shift<T: Scalar>(x: &Tensor<T>, spec: &WindowSpec) -> Result<Tensor<T>> {
        let (b, d) = token_dims(x.shape(), spec)?;
        x.gather_rows(d, &roll_index(spec.grid_h, spec.grid_w, spec.shift, b, true), x.shape())
    }

    pub fn unshift<T: Scalar>(x: &Tensor<T>, spec: &WindowSpec) -> Result<Tensor<T>> {
        let (b, d) = token_dims(x.shape(), spec)?;
        x.gather_rows(d, &roll_index(spec.grid_h, spec.grid_w, spec.shift, b, false), x.shape())
    }
}

fn region_bands(n: usize, m: usize, s: usize) -> impl Fn(usize) -> usize {
    move |i| {
        if i < n - m {
            0
        } else if i < n - s {
            1
        } else {
            2
        }
    }
}

/// Additive `[nW, M*M, M*M]` mask for a shifted grid: 0 where both tokens
/// come from the same pre-roll region, [`MASK_NEG`] otherwise.
pub fn shifted_attention_mask<T: Scalar>(spec: &WindowSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.shift == 0 {
        return Err(Error::config("attention mask requested for an unshifted window layout"));
    }
    let (m, s) = (spec.window, spec.shift);
    let band_y = region_bands(spec.grid_h, m, s);
    let band_x = region_bands(spec.grid_w, m, s);
    let region: Vec<usize> = (0..spec.grid_h)
        .flat_map(|i| (0..spec.grid_w).map(move |j| (i, j)))
        .map(|(i, j)| band_y(i) * 3 + band_x(j))
        .collect();
    let index = partition_index(spec, 1);
    let t = spec.window_tokens();
    let neg = T::from_f64(MASK_NEG);
    let mut data = Vec::with_capacity(spec.num_windows() * t * t);
    for w in 0..spec.num_windows() {
        let ids = &index[w * t..(w + 1) * t];
        for &p in ids {
            for &q in ids {
                data.push(if region[p] == region[q] { T::zero() } else { neg });
            }
        }
    }
    Tensor::new(&[spec.num_windows(), t, t], data)
}

/// Output of [`multi_head_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[*, T, d]`
    pub output: Var,
    /// Post-softmax attention weights `[Bw, h, T, T]`.
    pub weights: Var,
}

/// Scaled dot-product attention over `h` heads of `z: [Bw, T, d]`.
///
/// `mask`, when given, is `[nW, T, T]` and is added to the scores of batch
/// entry `i` using window `i % nW`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    params: &AttentionParams<Var>,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<AttentionOutput> {
    let shape = g.shape(z).to_vec();
    let [bw, t, d] = shape[..] else {
        return Err(Error::shape(format!("attention input must be [B, T, d], got {shape:?}")));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("embedding width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let split = |g: &mut Graph<T>, w: Var| -> Result<Var> {
        let p = g.matmul(z, w)?;
        let p = g.reshape(p, &[bw, t, heads, dk])?;
        g.permute(p, &[0, 2, 1, 3])
    };
    let q = split(g, params.w_q)?;
    let k = split(g, params.w_k)?;
    let v = split(g, params.w_v)?;
    let kt = g.transpose_last(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, T::from_f64(1.0 / (dk as f64).sqrt()));
    if let Some(mask) = mask {
        let [nw, mt, mt2] = mask.shape() else {
            return Err(Error::shape(format!("mask must be [nW, T, T], got {:?}", mask.shape())));
        };
        if *mt != t || *mt2 != t || bw % nw != 0 {
            return Err(Error::shape(format!("mask {:?} incompatible with scores [{bw}, {heads}, {t}, {t}]", mask.shape())));
        }
        let mut full = Vec::with_capacity(bw * heads * t * t);
        for b in 0..bw {
            let win = &mask.data()[(b % nw) * t * t..(b % nw + 1) * t * t];
            for _ in 0..heads {
                full.extend_from_slice(win);
            }
        }
        let m = g.constant(Tensor::new(&[bw, heads, t, t], full)?);
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax(scores, 3)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[bw, t, d])?;
    let output = g.matmul(ctx, params.w_o)?;
    Ok(AttentionOutput { output, weights })
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionSublayerParams<H> {
    pub norm: LayerNormParams<H>,
    pub attn: AttentionParams<H>,
}

/// Pre-norm residual attention: `z + unshift(reverse(MHA(partition(shift(LN(z))))))`.
///
/// A sequence with a class token must use a single full-grid window without shift.
pub fn attention_sublayer<T: Scalar>(
    g: &mut Graph<T>,
    z: TokenSequence,
    params: &AttentionSublayerParams<Var>,
    spec: &WindowSpec,
    heads: usize,
    eps: f64,
) -> Result<TokenSequence> {
    Ok(attention_sublayer_traced(g, z, params, spec, heads, eps)?.0)
}

/// [`attention_sublayer`] that also returns the attention weights.
pub fn attention_sublayer_traced<T: Scalar>(
    g: &mut Graph<T>,
    z: TokenSequence,
    params: &AttentionSublayerParams<Var>,
    spec: &WindowSpec,
    heads: usize,
    eps: f64,
) -> Result<(TokenSequence, Var)> {
    spec.validate()?;
    if (spec.grid_h, spec.grid_w) != (z.grid_h, z.grid_w) {
        return Err(Error::shape(format!(
            "window spec grid {}x{} differs from token grid {}x{}",
            spec.grid_h, spec.grid_w, z.grid_h, z.grid_w
        )));
    }
    let normed = layer_norm(g, z.tokens, &params.norm, eps)?;
    let (attended, weights) = if z.has_cls {
        if spec.window != spec.grid_h || spec.window != spec.grid_w || spec.shift != 0 {
            return Err(Error::config("class-token sequences need one unshifted full-grid window"));
        }
        let out = multi_head_attention(g, normed, &params.attn, heads, None)?;
        (out.output, out.weights)
    } else {
        let mask = if spec.shift > 0 { Some(shifted_attention_mask::<T>(spec)?) } else { None };
        let x = cyclic_shift(g, normed, spec)?;
        let windows = window_partition(g, x, spec)?;
        let out = multi_head_attention(g, windows, &params.attn, heads, mask.as_ref())?;
        let x = window_reverse(g, out.output, spec)?;
        (cyclic_unshift(g, x, spec)?, out.weights)
    };
    let tokens = g.add(z.tokens, attended)?;
    Ok((z.with_tokens(tokens), weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, weighted_sum, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn partition_8x8_into_four_windows() {
        let spec = WindowSpec::new(4, 0, 8, 8).unwrap();
        let x = Tensor::<f64>::new(&[1, 64, 1], (0..64).map(f64::from).collect()).unwrap();
        let w = layout::partition(&x, &spec).unwrap();
        assert_eq!(w.shape(), &[4, 16, 1]);
        // window 1 is the top-right 4x4 block
        let expect: Vec<f64> = (0..4).flat_map(|r| (4..8).map(move |c| f64::from(r * 8 + c))).collect();
        assert_eq!(&w.data()[16..32], &expect[..]);
        // window 2 starts at row 4, column 0
        assert_eq!(w.data()[32], 32.0);
    }

    #[test]
    fn full_window_keeps_order() {
        let spec = WindowSpec::new(4, 0, 4, 4).unwrap();
        let x = random(&[2, 16, 3], 1);
        let w = layout::partition(&x, &spec).unwrap();
        assert_eq!(w.data(), x.data());
    }

    #[test]
    fn indivisible_grid_rejected() {
        assert!(WindowSpec::new(3, 0, 8, 8).is_err());
        assert!(WindowSpec::new(4, 1, 8, 8).is_err());
    }

    #[test]
    fn roll_conventions() {
        let spec = WindowSpec::new(4, 2, 4, 4).unwrap();
        let x = Tensor::<f64>::new(&[1, 16, 1], (0..16).map(f64::from).collect()).unwrap();
        let un = layout::unshift(&x, &spec).unwrap();
        // token (0,0) lands at (2,2)
        assert_eq!(un.get(&[0, 2 * 4 + 2, 0]), 0.0);
        let sh = layout::shift(&x, &spec).unwrap();
        // shifted (0,0) holds original (2,2)
        assert_eq!(sh.get(&[0, 0, 0]), 10.0);
        assert_eq!(layout::unshift(&sh, &spec).unwrap(), x);

        let spec0 = WindowSpec::new(4, 0, 4, 4).unwrap();
        assert_eq!(layout::shift(&x, &spec0).unwrap(), x);
    }

    #[test]
    fn mask_requires_shift() {
        let spec = WindowSpec::new(2, 0, 4, 4).unwrap();
        assert!(shifted_attention_mask::<f64>(&spec).is_err());
    }

    /// Two shifted positions may attend iff neither axis separates them by a wrap.
    fn brute_force_allowed(spec: &WindowSpec, p: usize, q: usize) -> bool {
        let (h, w, s) = (spec.grid_h, spec.grid_w, spec.shift);
        let (pi, pj, qi, qj) = (p / w, p % w, q / w, q % w);
        let wrapped = |i: usize, n: usize| i + s >= n;
        wrapped(pi, h) == wrapped(qi, h) && wrapped(pj, w) == wrapped(qj, w)
    }

    #[test]
    fn mask_matches_brute_force_regions() {
        for (grid, m) in [(4, 2), (8, 4), (6, 2), (9, 3)] {
            let spec = WindowSpec::new(m, m / 2, grid, grid).unwrap();
            let mask = shifted_attention_mask::<f64>(&spec).unwrap();
            let index = partition_index(&spec, 1);
            let t = m * m;
            for w in 0..spec.num_windows() {
                for a in 0..t {
                    for b in 0..t {
                        let allowed = brute_force_allowed(&spec, index[w * t + a], index[w * t + b]);
                        let v = mask.get(&[w, a, b]);
                        assert_eq!(v == 0.0, allowed, "grid {grid} M {m} window {w} pair ({a},{b})");
                    }
                }
            }
        }
        // 4x4 grid, M=2, s=1: the bottom-right window mixes four regions
        let spec = WindowSpec::new(2, 1, 4, 4).unwrap();
        let mask = shifted_attention_mask::<f64>(&spec).unwrap();
        let blocked = (0..4).flat_map(|a| (0..4).map(move |b| (a, b))).filter(|&(a, b)| mask.get(&[3, a, b]) != 0.0).count();
        assert_eq!(blocked, 12);
    }

    /// Straight-line evaluation of softmax(Q K^T / sqrt(d_k)) V per head, then W_O.
    fn reference_attention(z: &Tensor<f64>, w: [&Tensor<f64>; 4], heads: usize) -> Tensor<f64> {
        let [b, t, d] = z.shape()[..] else { unreachable!() };
        let dk = d / heads;
        let proj = |w: &Tensor<f64>, bi: usize, i: usize, c: usize| (0..d).map(|k| z.get(&[bi, i, k]) * w.get(&[k, c])).sum::<f64>();
        let mut out = Tensor::zeros(&[b, t, d]);
        for bi in 0..b {
            let mut concat = vec![vec![0.0; d]; t];
            for h in 0..heads {
                for i in 0..t {
                    let scores: Vec<f64> = (0..t)
                        .map(|j| (0..dk).map(|c| proj(w[0], bi, i, h * dk + c) * proj(w[1], bi, j, h * dk + c)).sum::<f64>() / (dk as f64).sqrt())
                        .collect();
                    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z_: f64 = e.iter().sum();
                    for c in 0..dk {
                        concat[i][h * dk + c] = (0..t).map(|j| e[j] / z_ * proj(w[2], bi, j, h * dk + c)).sum();
                    }
                }
            }
            for i in 0..t {
                for c in 0..d {
                    out.set(&[bi, i, c], (0..d).map(|k| concat[i][k] * w[3].get(&[k, c])).sum());
                }
            }
        }
        out
    }

    fn run_mha(z: &Tensor<f64>, w: [&Tensor<f64>; 4], heads: usize) -> Tensor<f64> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let p = AttentionParams {
            w_q: g.constant(w[0].clone()),
            w_k: g.constant(w[1].clone()),
            w_v: g.constant(w[2].clone()),
            w_o: g.constant(w[3].clone()),
        };
        let out = multi_head_attention(&mut g, zv, &p, heads, None).unwrap();
        g.value(out.output).clone()
    }

    #[test]
    fn mha_matches_straight_line_reference() {
        let z = random(&[1, 3, 4], 1);
        let ws: Vec<Tensor<f64>> = (0..4).map(|i| random(&[4, 4], 10 + i)).collect();
        let w = [&ws[0], &ws[1], &ws[2], &ws[3]];
        for heads in [1, 2] {
            let got = run_mha(&z, w, heads);
            let want = reference_attention(&z, w, heads);
            assert!(got.max_abs_diff(&want) < 1e-10, "heads {heads}");
        }
    }

    #[test]
    fn mha_zero_values_and_single_token() {
        let z = random(&[2, 5, 4], 2);
        let ws: Vec<Tensor<f64>> = (0..4).map(|i| random(&[4, 4], 20 + i)).collect();
        let zero = Tensor::zeros(&[4, 4]);
        let out = run_mha(&z, [&ws[0], &ws[1], &zero, &ws[3]], 2);
        assert!(out.data().iter().all(|&v| v == 0.0));

        let single = random(&[1, 1, 4], 3);
        let out = run_mha(&single, [&ws[0], &ws[1], &ws[2], &ws[3]], 2);
        let mut g = Graph::new();
        let s = g.constant(single);
        let wv = g.constant(ws[2].clone());
        let wo = g.constant(ws[3].clone());
        let sv = g.matmul(s, wv).unwrap();
        let svo = g.matmul(sv, wo).unwrap();
        assert!(out.max_abs_diff(g.value(svo)) < 1e-14);
    }

    #[test]
    fn mha_rejects_indivisible_heads() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 2, 4]));
        let w = g.constant(Tensor::zeros(&[4, 4]));
        let p = AttentionParams { w_q: w, w_k: w, w_v: w, w_o: w };
        assert!(multi_head_attention(&mut g, z, &p, 3, None).is_err());
    }

    fn sublayer_inputs(d: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut v = vec![random(&[d], seed).map(|x| 1.0 + 0.3 * x), random(&[d], seed + 1).map(|x| 0.1 * x)];
        v.extend((0..4).map(|i| random(&[d, d], seed + 2 + i)));
        v
    }

    fn sublayer_params(v: &[Var]) -> AttentionSublayerParams<Var> {
        AttentionSublayerParams {
            norm: LayerNormParams { gamma: v[0], beta: v[1] },
            attn: AttentionParams { w_q: v[2], w_k: v[3], w_v: v[4], w_o: v[5] },
        }
    }

    #[test]
    fn zero_weights_make_sublayer_identity() {
        let z = random(&[2, 16, 4], 5);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let w = g.constant(Tensor::zeros(&[4, 4]));
        let p = AttentionSublayerParams {
            norm: LayerNormParams { gamma, beta },
            attn: AttentionParams { w_q: w, w_k: w, w_v: w, w_o: w },
        };
        let spec = WindowSpec::new(2, 1, 4, 4).unwrap();
        let ts = TokenSequence { tokens: zv, grid_h: 4, grid_w: 4, has_cls: false };
        let out = attention_sublayer(&mut g, ts, &p, &spec, 2, 1e-5).unwrap();
        assert_eq!(g.value(out.tokens), &z);
    }

    #[test]
    fn shifted_weights_respect_mask() {
        let z = random(&[2, 16, 4], 6);
        let inputs = sublayer_inputs(4, 30);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let zv = g.constant(z);
        let spec = WindowSpec::new(2, 1, 4, 4).unwrap();
        let ts = TokenSequence { tokens: zv, grid_h: 4, grid_w: 4, has_cls: false };
        let (out, weights) = attention_sublayer_traced(&mut g, ts, &sublayer_params(&vars), &spec, 2, 1e-5).unwrap();
        assert_eq!(g.shape(out.tokens), &[2, 16, 4]);
        // B * nW * h * M^4 scores
        assert_eq!(g.shape(weights), &[2 * 4, 2, 4, 4]);
        let mask = shifted_attention_mask::<f64>(&spec).unwrap();
        let w = g.value(weights);
        for bw in 0..8 {
            for h in 0..2 {
                for i in 0..4 {
                    let row: f64 = (0..4).map(|j| w.get(&[bw, h, i, j])).sum();
                    assert!((row - 1.0).abs() < 1e-9);
                    for j in 0..4 {
                        if mask.get(&[bw % 4, i, j]) != 0.0 {
                            assert!(w.get(&[bw, h, i, j]) < 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn score_size_independent_of_image_size() {
        for grid in [4, 8, 12] {
            let spec = WindowSpec::new(2, 0, grid, grid).unwrap();
            let inputs = sublayer_inputs(4, 40);
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let zv = g.constant(random(&[1, grid * grid, 4], 41));
            let ts = TokenSequence { tokens: zv, grid_h: grid, grid_w: grid, has_cls: false };
            let (_, weights) = attention_sublayer_traced(&mut g, ts, &sublayer_params(&vars), &spec, 2, 1e-5).unwrap();
            // per window: h * M^4 entries
            let per_window = g.value(weights).len() / spec.num_windows();
            assert_eq!(per_window, 2 * 16);
        }
    }

    #[test]
    fn sublayer_gradients_match_finite_differences() {
        let z = random(&[1, 16, 4], 7);
        let inputs = {
            let mut v = sublayer_inputs(4, 50);
            v.push(z);
            v
        };
        let spec = WindowSpec::new(2, 1, 4, 4).unwrap();
        let report = check_gradients(&inputs, GradCheckConfig::default(), |g, v| {
            let ts = TokenSequence { tokens: v[6], grid_h: 4, grid_w: 4, has_cls: false };
            let out = attention_sublayer(g, ts, &sublayer_params(v), &spec, 2, 1e-5)?;
            weighted_sum(g, out.tokens, 3)
        })
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }
}
