//! Parameter trees, generic over the leaf type so the same layout holds
//! tensors (storage, checkpoints, optimizer state) or graph handles
//! (a forward pass).

use std::convert::Infallible;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NarvidError, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Structural map over every leaf, visiting in a fixed order with dotted names.
pub trait ParamTree<T> {
    type Out<U>;

    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<Self::Out<U>, E>;

    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Self::Out<U> {
        match self.try_map(prefix, &mut |n, t| Ok::<_, Infallible>(f(n, t))) {
            Ok(v) => v,
        }
    }

    fn for_each(&self, f: &mut impl FnMut(&str, &T)) {
        self.map("", &mut |n, t| f(n, t));
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> ParamTree<T> for LayerNorm<T> {
    type Out<U> = LayerNorm<U>;

    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<LayerNorm<U>, E> {
        Ok(LayerNorm { gain: f(&join(prefix, "gain"), &self.gain)?, bias: f(&join(prefix, "bias"), &self.bias)? })
    }
}

/// Query/key/value/output projections, each `D x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

impl<T> ParamTree<T> for Attention<T> {
    type Out<U> = Attention<U>;

    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<Attention<U>, E> {
        Ok(Attention {
            wq: f(&join(prefix, "wq"), &self.wq)?,
            wk: f(&join(prefix, "wk"), &self.wk)?,
            wv: f(&join(prefix, "wv"), &self.wv)?,
            wo: f(&join(prefix, "wo"), &self.wo)?,
        })
    }
}

/// Position-wise `W2 gelu(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> ParamTree<T> for FeedForward<T> {
    type Out<U> = FeedForward<U>;

    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<FeedForward<U>, E> {
        Ok(FeedForward {
            w1: f(&join(prefix, "w1"), &self.w1)?,
            b1: f(&join(prefix, "b1"), &self.b1)?,
            w2: f(&join(prefix, "w2"), &self.w2)?,
            b2: f(&join(prefix, "b2"), &self.b2)?,
        })
    }
}

/// One stream of the co-attention layer: own-modality queries attend the
/// other modality's keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct CoAttentionStream<T> {
    pub ln_query: LayerNorm<T>,
    pub ln_context: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T> ParamTree<T> for CoAttentionStream<T> {
    type Out<U> = CoAttentionStream<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<CoAttentionStream<U>, E> {
        Ok(CoAttentionStream {
            ln_query: self.ln_query.try_map(&join(prefix, "ln_query"), f)?,
            ln_context: self.ln_context.try_map(&join(prefix, "ln_context"), f)?,
            attn: self.attn.try_map(&join(prefix, "attn"), f)?,
            ln_ffn: self.ln_ffn.try_map(&join(prefix, "ln_ffn"), f)?,
            ffn: self.ffn.try_map(&join(prefix, "ffn"), f)?,
        })
    }
}

/// Self-attention encoder layer used by the temporal blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub ln_attn: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T> ParamTree<T> for EncoderLayer<T> {
    type Out<U> = EncoderLayer<U>;

    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<EncoderLayer<U>, E> {
        Ok(EncoderLayer {
            ln_attn: self.ln_attn.try_map(&join(prefix, "ln_attn"), f)?,
            attn: self.attn.try_map(&join(prefix, "attn"), f)?,
            ln_ffn: self.ln_ffn.try_map(&join(prefix, "ln_ffn"), f)?,
            ffn: self.ffn.try_map(&join(prefix, "ffn"), f)?,
        })
    }
}

/// Every learnable weight of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub co_video: CoAttentionStream<T>,
    pub co_narration: CoAttentionStream<T>,
    pub temporal_video: EncoderLayer<T>,
    pub temporal_narration: EncoderLayer<T>,
    /// `K_max x D` positional embedding.
    pub positional: T,
    /// `D x 1` word-weight map for the word-to-feature fine score.
    pub word_weight: T,
    /// Scalar bias of the word-weight map.
    pub word_bias: T,
}

impl<T> ParamTree<T> for Weights<T> {
    type Out<U> = Weights<U>;

    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<Weights<U>, E> {
        Ok(Weights {
            co_video: self.co_video.try_map(&join(prefix, "co_video"), f)?,
            co_narration: self.co_narration.try_map(&join(prefix, "co_narration"), f)?,
            temporal_video: self.temporal_video.try_map(&join(prefix, "temporal_video"), f)?,
            temporal_narration: self.temporal_narration.try_map(&join(prefix, "temporal_narration"), f)?,
            positional: f(&join(prefix, "positional"), &self.positional)?,
            word_weight: f(&join(prefix, "word_weight"), &self.word_weight)?,
            word_bias: f(&join(prefix, "word_bias"), &self.word_bias)?,
        })
    }
}

/// Graph handles for one forward pass.
pub type ModelVars = Weights<Var>;

/// Shape hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub max_frames: usize,
    pub ffn_hidden: usize,
}

impl ModelConfig {
    /// Feed-forward width defaults to `4 * dim`.
    pub fn new(dim: usize, heads: usize, max_frames: usize) -> Result<Self> {
        let cfg = ModelConfig { dim, heads, max_frames, ffn_hidden: 4 * dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(NarvidError::Config(format!("{} heads do not divide dim {}", self.heads, self.dim)));
        }
        if self.dim < 2 || self.max_frames == 0 || self.ffn_hidden == 0 {
            return Err(NarvidError::Config(format!("degenerate model shape {self:?}")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Expected shape of every named leaf.
    pub fn shapes(&self) -> Weights<Vec<usize>> {
        let (d, h) = (self.dim, self.ffn_hidden);
        let ln = || LayerNorm { gain: vec![d], bias: vec![d] };
        let attn = || Attention { wq: vec![d, d], wk: vec![d, d], wv: vec![d, d], wo: vec![d, d] };
        let ffn = || FeedForward { w1: vec![d, h], b1: vec![h], w2: vec![h, d], b2: vec![d] };
        let stream = || CoAttentionStream { ln_query: ln(), ln_context: ln(), attn: attn(), ln_ffn: ln(), ffn: ffn() };
        let layer = || EncoderLayer { ln_attn: ln(), attn: attn(), ln_ffn: ln(), ffn: ffn() };
        Weights {
            co_video: stream(),
            co_narration: stream(),
            temporal_video: layer(),
            temporal_narration: layer(),
            positional: vec![self.max_frames, d],
            word_weight: vec![d, 1],
            word_bias: vec![1],
        }
    }
}

/// Initialization role of a leaf, derived from its name.
fn init_kind(name: &str) -> InitKind {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "gain" => InitKind::Ones,
        "bias" | "b1" | "b2" | "positional" | "word_bias" => InitKind::Zeros,
        _ => InitKind::Glorot,
    }
}

enum InitKind {
    Ones,
    Zeros,
    Glorot,
}

/// Model configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

impl ModelParams {
    /// Seeded init: projections uniform in `±sqrt(6 / (fan_in + fan_out))`,
    /// norm gains 1, biases and positional embedding 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = config.shapes().map("", &mut |name, shape: &Vec<usize>| {
            let n: usize = shape.iter().product();
            let data = match init_kind(name) {
                InitKind::Ones => vec![1.0; n],
                InitKind::Zeros => vec![0.0; n],
                InitKind::Glorot => {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            Tensor::from_parts_unchecked(shape.clone(), data)
        });
        Ok(ModelParams { config, weights })
    }

    /// Checks every leaf against the configured shapes.
    pub fn validate(&self) -> Result<()> {
        let leaves = self.flatten().into_iter().map(|(_, t)| t).collect();
        ModelParams::from_flat(self.config, leaves).map(|_| ())
    }

    /// Adds every weight to `g` as a gradient leaf (or constant).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        self.weights.map("", &mut |_, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
    }

    /// Leaves in tree order with their dotted names.
    pub fn flatten(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.weights.for_each(&mut |n, t| out.push((n.to_owned(), t.clone())));
        out
    }

    /// Rebuilds parameters from leaves given in tree order.
    pub fn from_flat(config: ModelConfig, leaves: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut it = leaves.into_iter();
        let weights = config.shapes().try_map("", &mut |name, shape: &Vec<usize>| {
            let t = it.next().ok_or_else(|| NarvidError::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(NarvidError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        })?;
        if it.next().is_some() {
            return Err(NarvidError::Config("more parameter tensors than the model has".into()));
        }
        Ok(ModelParams { config, weights })
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.weights.for_each(&mut |_, t| n += t.numel());
        n
    }
}
