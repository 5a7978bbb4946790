//! Patchification and token embedding.
//!
//! An image `[B, H, W, C]` is cut into non-overlapping `P x P` patches in
//! row-major grid order, each flattened row-major as `(py, px, c)` into a
//! vector of length `P*P*C`. Patches are projected to the embedding width,
//! optionally prefixed with a class token, and offset by a learnable
//! positional table.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{ClsMode, PatchConfig};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, trunc_normal, BoundParams, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// A `[B, T, d]` token tensor on a graph plus its patch-grid layout.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Whether token 0 is a class token preceding the grid tokens.
    pub has_cls: bool,
}

impl TokenSequence {
    pub fn num_grid_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn with_tokens(self, tokens: Var) -> Self {
        Self { tokens, ..self }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingParams<H> {
    /// `[D, d]`
    pub projection: H,
    /// `[N, d]`, or `[N + 1, d]` with a class token
    pub positional: H,
    /// `[d]`
    pub class_token: Option<H>,
}

impl EmbeddingParams<ParamId> {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: &PatchConfig) -> Result<Self> {
        cfg.validate()?;
        let (big_d, d) = (cfg.patch_dim(), cfg.embed_dim);
        let projection = store.insert("embed.projection", glorot_uniform(rng, &[big_d, d], big_d, d))?;
        let positional = store.insert("embed.positional", trunc_normal(rng, &[cfg.seq_len(), d], 0.02))?;
        let class_token = match cfg.cls_mode {
            ClsMode::Pool => None,
            ClsMode::GlobalToken => Some(store.insert("embed.class_token", trunc_normal(rng, &[d], 0.02))?),
        };
        Ok(Self { projection, positional, class_token })
    }

    pub fn bind(&self, bound: &BoundParams) -> EmbeddingParams<Var> {
        EmbeddingParams {
            projection: bound.var(self.projection),
            positional: bound.var(self.positional),
            class_token: self.class_token.map(|c| bound.var(c)),
        }
    }
}

fn check_image_shape(shape: &[usize], p: usize) -> Result<(usize, usize, usize, usize)> {
    let [b, h, w, c] = shape else {
        return Err(Error::shape(format!("expected an image batch [B,H,W,C], got {shape:?}")));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!("image {h}x{w} is not divisible by patch size {p}")));
    }
    Ok((*b, *h, *w, *c))
}

/// Row-gather indices mapping an image, viewed as rows of `P*C` contiguous
/// values, onto patch order.
fn patch_rows(b: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let per_row = w / p;
    let mut index = Vec::with_capacity(b * h * per_row);
    for bi in 0..b {
        for gy in 0..h / p {
            for gx in 0..w / p {
                for py in 0..p {
                    let y = gy * p + py;
                    index.push((bi * h + y) * per_row + gx);
                }
            }
        }
    }
    index
}

fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (j, &i) in index.iter().enumerate() {
        inv[i] = j;
    }
    inv
}

/// `[B, H, W, C] -> [B, N, P*P*C]`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = check_image_shape(image.shape(), p)?;
    let index = patch_rows(b, h, w, p);
    image.gather_rows(p * c, &index, &[b, (h / p) * (w / p), p * p * c])
}

/// Inverse of [`patchify`] for an `h x w` image.
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    let [b, n, dd] = patches.shape() else {
        return Err(Error::shape(format!("expected patches [B,N,D], got {:?}", patches.shape())));
    };
    let c = dd / (p * p);
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || *n != (h / p) * (w / p) || c * p * p != *dd {
        return Err(Error::shape(format!("patches {:?} do not tile a {h}x{w} image with P={p}", patches.shape())));
    }
    let index = invert(&patch_rows(*b, h, w, p));
    patches.gather_rows(p * c, &index, &[*b, h, w, c])
}

/// Graph version of [`patchify`].
pub fn patchify_var<T: Scalar>(g: &mut Graph<T>, image: Var, p: usize) -> Result<Var> {
    let (b, h, w, c) = check_image_shape(g.shape(image), p)?;
    let index = patch_rows(b, h, w, p);
    g.gather_rows(image, p * c, index, &[b, (h / p) * (w / p), p * p * c])
}

/// Projects patches `[B, N, D]` to tokens, prepends the class token when
/// present and adds the positional table.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    patches: Var,
    params: &EmbeddingParams<Var>,
    cfg: &PatchConfig,
) -> Result<TokenSequence> {
    let shape = g.shape(patches).to_vec();
    let [b, n, big_d] = shape[..] else {
        return Err(Error::shape(format!("expected patches [B,N,D], got {shape:?}")));
    };
    if n != cfg.num_patches() || big_d != cfg.patch_dim() {
        return Err(Error::shape(format!(
            "patches {shape:?} do not match config (N={}, D={})",
            cfg.num_patches(),
            cfg.patch_dim()
        )));
    }
    let d = cfg.embed_dim;
    let mut tokens = g.matmul(patches, params.projection)?;
    let has_cls = match (cfg.cls_mode, params.class_token) {
        (ClsMode::GlobalToken, Some(cls)) => {
            if g.shape(cls) != [d] {
                return Err(Error::shape(format!("class token {:?} must be [{d}]", g.shape(cls))));
            }
            let cls_rows = g.gather_rows(cls, d, vec![0; b], &[b, 1, d])?;
            tokens = g.concat(&[cls_rows, tokens], 1)?;
            true
        }
        (ClsMode::Pool, None) => false,
        _ => return Err(Error::config("class token presence does not match cls_mode")),
    };
    let tokens = g.add_broadcast(tokens, params.positional)?;
    let (grid_h, grid_w) = cfg.grid();
    Ok(TokenSequence { tokens, grid_h, grid_w, has_cls })
}
