//! Token-mixing feed-forward sub-layers: the inverted residual block and the
//! plain two-layer FFN it replaces.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, BoundParams, ParamId, ParamStore};
use crate::patch_embedding::TokenSequence;
use crate::tensor::{Scalar, Tensor};
use crate::window_attention::{layer_norm, LayerNormParams};

#[derive(Clone, Copy, Debug)]
pub struct IrbParams<H> {
    /// `[d, r*d]`
    pub expand_w: H,
    pub expand_b: H,
    /// `[k, k, r*d]`
    pub dw_kernel: H,
    /// `[r*d, d]`
    pub project_w: H,
    pub project_b: H,
}

impl IrbParams<ParamId> {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        expansion: usize,
        kernel: usize,
    ) -> Result<Self> {
        let hidden = dim * expansion;
        let kk = kernel * kernel;
        Ok(Self {
            expand_w: store.insert(format!("{prefix}.expand_w"), glorot_uniform(rng, &[dim, hidden], dim, hidden))?,
            expand_b: store.insert(format!("{prefix}.expand_b"), Tensor::zeros(&[hidden]))?,
            dw_kernel: store.insert(format!("{prefix}.dw_kernel"), glorot_uniform(rng, &[kernel, kernel, hidden], kk, kk))?,
            project_w: store.insert(format!("{prefix}.project_w"), glorot_uniform(rng, &[hidden, dim], hidden, dim))?,
            project_b: store.insert(format!("{prefix}.project_b"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn bind(&self, b: &BoundParams) -> IrbParams<Var> {
        IrbParams {
            expand_w: b.var(self.expand_w),
            expand_b: b.var(self.expand_b),
            dw_kernel: b.var(self.dw_kernel),
            project_w: b.var(self.project_w),
            project_b: b.var(self.project_b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams<H> {
    pub w1: H,
    pub b1: H,
    pub w2: H,
    pub b2: H,
}

impl FfnParams<ParamId> {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w1: store.insert(format!("{prefix}.w1"), glorot_uniform(rng, &[dim, hidden], dim, hidden))?,
            b1: store.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.insert(format!("{prefix}.w2"), glorot_uniform(rng, &[hidden, dim], hidden, dim))?,
            b2: store.insert(format!("{prefix}.b2"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn bind(&self, b: &BoundParams) -> FfnParams<Var> {
        FfnParams { w1: b.var(self.w1), b1: b.var(self.b1), w2: b.var(self.w2), b2: b.var(self.b2) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IrbOptions {
    /// GELU after expansion and after the depthwise conv.
    pub activations: bool,
    /// Add the block input to the projected output.
    pub inner_skip: bool,
}

impl Default for IrbOptions {
    fn default() -> Self {
        Self { activations: true, inner_skip: true }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum FeedForward<H> {
    Irb(IrbParams<H>),
    Ffn(FfnParams<H>),
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

/// `GELU(x W1 + b1) W2 + b2`, applied per token.
pub fn ffn<T: Scalar>(g: &mut Graph<T>, x: Var, p: &FfnParams<Var>) -> Result<Var> {
    let h = linear(g, x, p.w1, p.b1)?;
    let h = g.gelu(h);
    linear(g, h, p.w2, p.b2)
}

/// `x + project(act(dwconv(act(expand(x)))))` on the token grid.
///
/// A class token has no grid position: it takes the pointwise
/// expand/project path and skips the depthwise conv.
pub fn irb<T: Scalar>(g: &mut Graph<T>, x: TokenSequence, p: &IrbParams<Var>, opts: IrbOptions) -> Result<TokenSequence> {
    let shape = g.shape(x.tokens).to_vec();
    let [b, t, d] = shape[..] else {
        return Err(Error::shape(format!("IRB input must be [B, T, d], got {shape:?}")));
    };
    let n = x.num_grid_tokens();
    let offset = usize::from(x.has_cls);
    if n == 0 || t != n + offset {
        return Err(Error::shape(format!(
            "{t} tokens do not match a {}x{} grid{}",
            x.grid_h,
            x.grid_w,
            if x.has_cls { " plus class token" } else { "" }
        )));
    }
    let hidden = g.shape(p.expand_w).get(1).copied().unwrap_or(0);
    let act = |g: &mut Graph<T>, v: Var| if opts.activations { g.gelu(v) } else { v };

    let grid = if x.has_cls { g.slice(x.tokens, 1, 1, n)? } else { x.tokens };
    let e = linear(g, grid, p.expand_w, p.expand_b)?;
    let e = act(g, e);
    let e = g.reshape(e, &[b, x.grid_h, x.grid_w, hidden])?;
    let c = g.depthwise_conv2d(e, p.dw_kernel)?;
    let c = act(g, c);
    let c = g.reshape(c, &[b, n, hidden])?;
    let mut out = linear(g, c, p.project_w, p.project_b)?;

    if x.has_cls {
        let cls = g.slice(x.tokens, 1, 0, 1)?;
        let ce = linear(g, cls, p.expand_w, p.expand_b)?;
        let ce = act(g, ce);
        let cp = linear(g, ce, p.project_w, p.project_b)?;
        out = g.concat(&[cp, out], 1)?;
    }
    if g.shape(out) != [b, t, d] {
        return Err(Error::shape(format!("IRB projection produced {:?}, expected [{b}, {t}, {d}]", g.shape(out))));
    }
    let tokens = if opts.inner_skip { g.add(x.tokens, out)? } else { out };
    Ok(x.with_tokens(tokens))
}

/// `z' + F(LN(z'))` where `F` is the IRB or the FFN.
pub fn block_output<T: Scalar>(
    g: &mut Graph<T>,
    z_prime: TokenSequence,
    norm: &LayerNormParams<Var>,
    sublayer: &FeedForward<Var>,
    opts: IrbOptions,
    eps: f64,
) -> Result<TokenSequence> {
    let normed = layer_norm(g, z_prime.tokens, norm, eps)?;
    let update = match sublayer {
        FeedForward::Irb(p) => irb(g, z_prime.with_tokens(normed), p, opts)?.tokens,
        FeedForward::Ffn(p) => ffn(g, normed, p)?,
    };
    let tokens = g.add(z_prime.tokens, update)?;
    Ok(z_prime.with_tokens(tokens))
}
