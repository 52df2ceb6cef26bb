use crate::dataio::Episode;
use crate::error::{NarvidError, Result};
use crate::model::params::{
    Attention, CoAttentionStream, EncoderLayer, FeedForward, LayerNorm, ModelParams, ModelVars,
};
use crate::numerics::{multi_head_attention, AttentionVars, Graph, Tensor, Var};

/// Which temporal block to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Video,
    Narration,
}

fn layer_norm(g: &mut Graph, x: Var, p: &LayerNorm<Var>) -> Result<Var> {
    g.layer_norm_rows(x, p.gain, p.bias)
}

fn attn_vars(p: &Attention<Var>) -> AttentionVars {
    AttentionVars { wq: p.wq, wk: p.wk, wv: p.wv, wo: p.wo }
}

fn feed_forward(g: &mut Graph, x: Var, p: &FeedForward<Var>) -> Result<Var> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, p.w2)?;
    g.add_row(o, p.b2)
}

/// Pre-norm cross-attention stream: `h = x + Attn(LN(x), LN(ctx))`,
/// then `h + FFN(LN(h))`.
fn co_stream(g: &mut Graph, x: Var, context: Var, p: &CoAttentionStream<Var>, heads: usize) -> Result<Var> {
    let q = layer_norm(g, x, &p.ln_query)?;
    let c = layer_norm(g, context, &p.ln_context)?;
    let a = multi_head_attention(g, q, c, c, &attn_vars(&p.attn), heads)?;
    let h = g.add(x, a)?;
    let n = layer_norm(g, h, &p.ln_ffn)?;
    let f = feed_forward(g, n, &p.ffn)?;
    g.add(h, f)
}

/// Co-attention between frames and captions; returns `(v_hat, n_hat)`.
///
/// Frames query the captions and captions query the frames, each stream
/// with its own parameters. Row `k` of both inputs describes the same
/// moment.
pub fn co_attention(g: &mut Graph, vars: &ModelVars, heads: usize, frames: Var, captions: Var) -> Result<(Var, Var)> {
    let (kf, kc) = (g.value(frames).rows(), g.value(captions).rows());
    if kf != kc {
        return Err(NarvidError::Shape(format!("{kf} frames but {kc} captions")));
    }
    let v_hat = co_stream(g, frames, captions, &vars.co_video, heads)?;
    let n_hat = co_stream(g, captions, frames, &vars.co_narration, heads)?;
    Ok((v_hat, n_hat))
}

/// Temporal block: `seq + Enc(seq + P[..K])`, where `Enc` returns only the
/// residual-branch updates (attention and feed-forward outputs) of one
/// pre-norm encoder layer. The outer residual is the input itself, so
/// zeroed output projections make the block the identity.
pub fn temporal(g: &mut Graph, vars: &ModelVars, heads: usize, seq: Var, modality: Modality) -> Result<Var> {
    let k = g.value(seq).rows();
    let k_max = g.value(vars.positional).rows();
    if k > k_max {
        return Err(NarvidError::Config(format!("{k} frames exceed the positional table ({k_max})")));
    }
    let layer: &EncoderLayer<Var> = match modality {
        Modality::Video => &vars.temporal_video,
        Modality::Narration => &vars.temporal_narration,
    };
    let rows: Vec<usize> = (0..k).collect();
    let pos = g.gather_rows(vars.positional, &rows)?;
    let x = g.add(seq, pos)?;
    let xn = layer_norm(g, x, &layer.ln_attn)?;
    let u = multi_head_attention(g, xn, xn, xn, &attn_vars(&layer.attn), heads)?;
    let h = g.add(x, u)?;
    let hn = layer_norm(g, h, &layer.ln_ffn)?;
    let f = feed_forward(g, hn, &layer.ffn)?;
    let out = g.add(seq, u)?;
    g.add(out, f)
}

/// Graph handles for one episode's enhanced features.
#[derive(Clone, Copy, Debug)]
pub struct EnhancedVars {
    pub v_hat: Var,
    pub n_hat: Var,
    pub v_check: Var,
    pub n_check: Var,
}

/// Co-attention followed by the per-modality temporal blocks.
pub fn enhance(g: &mut Graph, vars: &ModelVars, heads: usize, frames: Var, captions: Var) -> Result<EnhancedVars> {
    let (v_hat, n_hat) = co_attention(g, vars, heads, frames, captions)?;
    let v_check = temporal(g, vars, heads, v_hat, Modality::Video)?;
    let n_check = temporal(g, vars, heads, n_hat, Modality::Narration)?;
    Ok(EnhancedVars { v_hat, n_hat, v_check, n_check })
}

/// Detached enhanced features of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedFeatures {
    pub v_hat: Tensor,
    pub n_hat: Tensor,
    pub v_check: Tensor,
    pub n_check: Tensor,
}

impl ModelParams {
    /// Runs the enhancement stack on one episode without recording gradients.
    pub fn enhance_episode(&self, ep: &Episode) -> Result<EnhancedFeatures> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let frames = g.constant(ep.frames.clone());
        let captions = g.constant(ep.captions.clone());
        let e = enhance(&mut g, &vars, self.config.heads, frames, captions)?;
        Ok(EnhancedFeatures {
            v_hat: g.value(e.v_hat).clone(),
            n_hat: g.value(e.n_hat).clone(),
            v_check: g.value(e.v_check).clone(),
            n_check: g.value(e.n_check).clone(),
        })
    }
}
