//! Full network: embedding, stacked blocks, pooling and classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{ClsMode, ModelConfig, SublayerKind};
use crate::error::{CheckpointError, Error, Result};
use crate::inverse_residual::{block_output, FeedForward, FfnParams, IrbOptions, IrbParams};
use crate::params::{glorot_uniform, BoundParams, ParamId, ParamStore};
use crate::patch_embedding::{embed, patchify_var, EmbeddingParams, TokenSequence};
use crate::tensor::{Scalar, Tensor};
use crate::window_attention::{
    attention_sublayer, layer_norm, AttentionParams, AttentionSublayerParams, LayerNormParams, WindowSpec,
};

#[derive(Clone, Copy, Debug)]
pub struct BlockParams<H> {
    pub attention: AttentionSublayerParams<H>,
    pub norm2: LayerNormParams<H>,
    pub feed_forward: FeedForward<H>,
}

/// 2x2 neighbour concatenation followed by norm and a `4d -> 2d` projection.
#[derive(Clone, Copy, Debug)]
pub struct MergeParams<H> {
    pub norm: LayerNormParams<H>,
    pub reduction: H,
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub merge: Option<MergeParams<ParamId>>,
    pub blocks: Vec<BlockParams<ParamId>>,
}

#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub embedding: EmbeddingParams<ParamId>,
    pub stages: Vec<StageParams>,
    pub final_norm: LayerNormParams<ParamId>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl ModelLayout {
    fn init<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embedding = EmbeddingParams::init(store, rng, &cfg.patch())?;
        let mut stages = Vec::with_capacity(cfg.depths.len());
        for (s, &(_, _, dim)) in cfg.stage_geometry().iter().enumerate() {
            let merge = if s > 0 && cfg.stage_merging {
                let prefix = format!("stage{s}.merge");
                let in_dim = 2 * dim;
                Some(MergeParams {
                    norm: LayerNormParams::init(store, &format!("{prefix}.norm"), in_dim)?,
                    reduction: store.insert(format!("{prefix}.reduction"), glorot_uniform(rng, &[in_dim, dim], in_dim, dim))?,
                })
            } else {
                None
            };
            let mut blocks = Vec::with_capacity(cfg.depths[s]);
            for b in 0..cfg.depths[s] {
                let prefix = format!("stage{s}.block{b}");
                let attention = AttentionSublayerParams {
                    norm: LayerNormParams::init(store, &format!("{prefix}.norm1"), dim)?,
                    attn: AttentionParams::init(store, rng, &format!("{prefix}.attn"), dim)?,
                };
                let norm2 = LayerNormParams::init(store, &format!("{prefix}.norm2"), dim)?;
                let feed_forward = match cfg.sublayer {
                    SublayerKind::Irb => FeedForward::Irb(IrbParams::init(
                        store,
                        rng,
                        &format!("{prefix}.irb"),
                        dim,
                        cfg.expansion,
                        cfg.kernel_size,
                    )?),
                    SublayerKind::Ffn => {
                        FeedForward::Ffn(FfnParams::init(store, rng, &format!("{prefix}.ffn"), dim, dim * cfg.ffn_ratio)?)
                    }
                };
                blocks.push(BlockParams { attention, norm2, feed_forward });
            }
            stages.push(StageParams { merge, blocks });
        }
        let d = cfg.final_dim();
        let final_norm = LayerNormParams::init(store, "final_norm", d)?;
        let head_w = store.insert("head.weight", glorot_uniform(rng, &[d, cfg.num_classes], d, cfg.num_classes))?;
        let head_b = store.insert("head.bias", Tensor::zeros(&[cfg.num_classes]))?;
        Ok(Self { embedding, stages, final_norm, head_w, head_b })
    }
}

pub fn bind_block(p: &BlockParams<ParamId>, b: &BoundParams) -> BlockParams<Var> {
    BlockParams {
        attention: AttentionSublayerParams { norm: p.attention.norm.bind(b), attn: p.attention.attn.bind(b) },
        norm2: p.norm2.bind(b),
        feed_forward: match &p.feed_forward {
            FeedForward::Irb(i) => FeedForward::Irb(i.bind(b)),
            FeedForward::Ffn(f) => FeedForward::Ffn(f.bind(b)),
        },
    }
}

/// One block: windowed attention sub-layer, then the feed-forward sub-layer.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    z: TokenSequence,
    p: &BlockParams<Var>,
    spec: &WindowSpec,
    heads: usize,
    opts: IrbOptions,
    eps: f64,
) -> Result<TokenSequence> {
    let z_prime = attention_sublayer(g, z, &p.attention, spec, heads, eps)?;
    block_output(g, z_prime, &p.norm2, &p.feed_forward, opts, eps)
}

/// Gather index concatenating each 2x2 neighbourhood into one token.
fn merge_index(batch: usize, h: usize, w: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    index.push(b * h * w + (2 * i + di) * w + 2 * j + dj);
                }
            }
        }
    }
    index
}

fn patch_merge<T: Scalar>(g: &mut Graph<T>, z: TokenSequence, p: &MergeParams<Var>, eps: f64) -> Result<TokenSequence> {
    let shape = g.shape(z.tokens).to_vec();
    let [b, _, d] = shape[..] else {
        return Err(Error::shape(format!("merge input must be [B, T, d], got {shape:?}")));
    };
    let (h, w) = (z.grid_h, z.grid_w);
    let x = g.gather_rows(z.tokens, d, merge_index(b, h, w), &[b, (h / 2) * (w / 2), 4 * d])?;
    let x = layer_norm(g, x, &p.norm, eps)?;
    let tokens = g.matmul(x, p.reduction)?;
    Ok(TokenSequence { tokens, grid_h: h / 2, grid_w: w / 2, has_cls: false })
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B, num_classes]`
    pub logits: Var,
    /// Pooled features before dropout, `[B, d_final]`.
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: ModelLayout,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = ModelLayout::init(&config, &mut params, &mut rng)?;
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model around externally supplied parameters, which must
    /// match the config's parameter names, order and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        let expected = &reference.params;
        if expected.len() != params.len() {
            return Err(CheckpointError::Incompatible(format!(
                "config implies {} parameter tensors, found {}",
                expected.len(),
                params.len()
            ))
            .into());
        }
        for ((en, et), (name, t)) in expected.iter().zip(params.iter()) {
            if en != name {
                return Err(CheckpointError::Incompatible(format!("expected parameter {en}, found {name}")).into());
            }
            if et.shape() != t.shape() {
                return Err(CheckpointError::ShapeDisagreement {
                    name: name.to_string(),
                    found: t.shape().to_vec(),
                    expected: et.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(Self { config: reference.config, params, layout: reference.layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn irb_options(&self) -> IrbOptions {
        IrbOptions { activations: self.config.irb_activations, inner_skip: self.config.irb_inner_skip }
    }

    /// Window layout of every block, in order.
    pub fn window_specs(&self) -> Result<Vec<WindowSpec>> {
        let cfg = &self.config;
        let mut specs = Vec::new();
        for (s, &(h, w, _)) in cfg.stage_geometry().iter().enumerate() {
            for b in 0..cfg.depths[s] {
                specs.push(WindowSpec::new(cfg.stage_window(s), cfg.block_shift(s, b), h, w)?);
            }
        }
        Ok(specs)
    }

    /// Records the forward pass of `images: [B, H, W, C]` on `g`.
    ///
    /// Dropout on the pooled features is applied only when `dropout_rng` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        images: Var,
        dropout_rng: Option<&mut R>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != [cfg.image_height, cfg.image_width, cfg.channels] {
            return Err(Error::shape(format!(
                "images {shape:?} do not match configured [B, {}, {}, {}]",
                cfg.image_height, cfg.image_width, cfg.channels
            )));
        }
        let batch = shape[0];
        let patches = patchify_var(g, images, cfg.patch_size)?;
        let mut z = embed(g, patches, &self.layout.embedding.bind(bound), &cfg.patch())?;
        let opts = self.irb_options();
        for (s, stage) in self.layout.stages.iter().enumerate() {
            if let Some(merge) = &stage.merge {
                let mp = MergeParams { norm: merge.norm.bind(bound), reduction: bound.var(merge.reduction) };
                z = patch_merge(g, z, &mp, cfg.ln_eps)?;
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                let spec = WindowSpec::new(cfg.stage_window(s), cfg.block_shift(s, b), z.grid_h, z.grid_w)?;
                z = block_forward(g, z, &bind_block(block, bound), &spec, cfg.heads[s], opts, cfg.ln_eps)?;
            }
        }
        let normed = layer_norm(g, z.tokens, &self.layout.final_norm.bind(bound), cfg.ln_eps)?;
        let features = match cfg.cls_mode {
            ClsMode::Pool => g.mean_axis(normed, 1)?,
            ClsMode::GlobalToken => {
                let cls = g.slice(normed, 1, 0, 1)?;
                g.reshape(cls, &[batch, cfg.final_dim()])?
            }
        };
        let mut pooled = features;
        if let Some(rng) = dropout_rng {
            let p = cfg.head_dropout;
            if p > 0.0 {
                let keep = 1.0 - p;
                let n = g.value(features).len();
                let mask: Vec<T> = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { T::from_f64(1.0 / keep) } else { T::zero() })
                    .collect();
                let m = g.constant(Tensor::new(g.shape(features), mask)?);
                pooled = g.mul(features, m)?;
            }
        }
        let logits = g.matmul(pooled, bound.var(self.layout.head_w))?;
        let logits = g.add_broadcast(logits, bound.var(self.layout.head_b))?;
        Ok(ForwardOutput { logits, features })
    }

    /// Evaluation-mode forward returning `(logits, features)` as plain tensors.
    pub fn predict(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.constant(images.clone());
        let out = self.forward::<ChaCha8Rng>(&mut g, &bound, x, None)?;
        Ok((g.value(out.logits).clone(), g.value(out.features).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [b, cfg.image_height, cfg.image_width, cfg.channels];
        let n = shape.iter().product();
        Tensor::new(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn full_config_logit_shape() {
        let cfg = ModelConfig::full();
        let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
        let img = images(1, &cfg, 2).cast::<f32>();
        let (logits, feats) = model.predict(&img).unwrap();
        assert_eq!(logits.shape(), &[1, 5]);
        assert_eq!(feats.shape(), &[1, 96]);
        assert!(logits.all_finite());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let img = images(3, &cfg, 2);
        assert_eq!(model.predict(&img).unwrap(), model.predict(&img).unwrap());
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut cfg = ModelConfig::tiny();
        cfg.head_dropout = 0.5;
        let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let img = images(2, &cfg, 2);
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g);
        let x = g.constant(img.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = model.forward(&mut g, &bound, x, Some(&mut rng)).unwrap();
        let (eval_logits, eval_feats) = model.predict(&img).unwrap();
        assert_eq!(g.value(out.features), &eval_feats);
        assert_ne!(g.value(out.logits), &eval_logits);
    }

    #[test]
    fn rejects_wrong_image_size() {
        let model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        assert!(model.predict(&Tensor::zeros(&[1, 16, 16, 3])).is_err());
    }

    #[test]
    fn parameters_registered_once() {
        let model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        let names: std::collections::BTreeSet<&str> = model.params().iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), model.params().len());
    }

    #[test]
    fn window_specs_alternate_shift() {
        let mut cfg = ModelConfig::tiny();
        cfg.depths = vec![4];
        let model = Model::<f64>::new(cfg, 1).unwrap();
        let shifts: Vec<usize> = model.window_specs().unwrap().iter().map(|s| s.shift).collect();
        assert_eq!(shifts, vec![0, 1, 0, 1]);
    }

    #[test]
    fn merging_and_global_token_variants_run() {
        let mut cfg = ModelConfig::tiny();
        cfg.image_height = 16;
        cfg.image_width = 16;
        cfg.depths = vec![2, 2];
        cfg.heads = vec![2, 4];
        cfg.stage_merging = true;
        let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let (logits, feats) = model.predict(&images(2, &cfg, 4)).unwrap();
        assert_eq!((logits.shape(), feats.shape()), (&[2, 5][..], &[2, 16][..]));

        let mut cfg = ModelConfig::tiny();
        cfg.cls_mode = ClsMode::GlobalToken;
        cfg.window_size = 4;
        let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        assert!(model.params().by_name("embed.class_token").is_some());
        let (logits, _) = model.predict(&images(2, &cfg, 4)).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
    }

    #[test]
    fn from_params_checks_shapes_and_kinds() {
        let tiny = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        let mut ffn_cfg = ModelConfig::tiny();
        ffn_cfg.sublayer = SublayerKind::Ffn;
        let err = Model::from_params(ffn_cfg, tiny.params().clone()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::Incompatible(_))), "{err}");

        let mut wide = ModelConfig::tiny();
        wide.embed_dim = 16;
        let err = Model::from_params(wide, tiny.params().clone()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::ShapeDisagreement { .. })), "{err}");
    }
}
