//! Coarse and fine query-to-sequence scores and the batch similarity
//! matrices built from them.
//!
//! For one query and one filtered candidate sequence:
//!
//! ```text
//! coarse = cos(w_eos, sum_k weight_k z_k)
//! M[k,l] = cos(z_k, w_l)                       (EOS excluded from the words)
//! w2f    = sum_k weight_k max_l M[k,l]
//! f2w    = sum_l a_l max_k M[k,l],  a = softmax((W u + b) / tau)
//! final  = (coarse + w2f + f2w) / 2
//! ```

use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::Episode;
use crate::error::{NarvidError, Result};
use crate::filtering::{filter_graph, FilterMode, FilterSelection};
use crate::model::{EnhancedFeatures, ModelParams, ModelVars};
use crate::numerics::{cosine, softmax_temp, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairScore {
    pub s_coarse: f64,
    pub s_w2f: f64,
    pub s_f2w: f64,
    pub s_fine: f64,
    pub s_final: f64,
}

/// Cosine of the EOS embedding with the weighted pool of the selected rows.
pub fn coarse_score(eos: &[f64], selection: &FilterSelection, features: &Tensor) -> Result<f64> {
    let mut pooled = vec![0.0; features.cols()];
    for (&k, &w) in selection.selected.iter().zip(&selection.weights) {
        for (p, f) in pooled.iter_mut().zip(features.row(k)) {
            *p += w * f;
        }
    }
    cosine(eos, &pooled)
}

/// Word weights `softmax((words u + b) / tau)` for the f2w direction.
pub fn word_weights(words: &Tensor, u: &Tensor, bias: f64, tau: f64) -> Result<Vec<f64>> {
    let logits: Vec<f64> =
        words.row_iter().map(|w| w.iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>() + bias).collect();
    softmax_temp(&logits, tau)
}

/// `(s_w2f, s_f2w)` over the selected rows of `features` and the content
/// words (no EOS) of the query.
pub fn fine_score(words: &Tensor, selection: &FilterSelection, features: &Tensor, a: &[f64]) -> Result<(f64, f64)> {
    if words.rows() == 0 {
        return Err(NarvidError::Usage("fine matching needs at least one word".into()));
    }
    let sim: Vec<Vec<f64>> = selection
        .selected
        .iter()
        .map(|&k| words.row_iter().map(|w| cosine(features.row(k), w)).collect())
        .collect::<Result<_>>()?;
    let w2f = sim.iter().zip(&selection.weights).map(|(row, w)| w * row.iter().copied().fold(f64::MIN, f64::max)).sum();
    let f2w = (0..words.rows()).map(|l| a[l] * sim.iter().map(|r| r[l]).fold(f64::MIN, f64::max)).sum();
    Ok((w2f, f2w))
}

/// Graph handles for one query: EOS row, content words, f2w word weights.
#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    pub eos: Var,
    pub words: Var,
    pub word_weights: Var,
}

pub fn query_graph(g: &mut Graph, vars: &ModelVars, ep: &Episode, tau: f64) -> Result<QueryVars> {
    let l = ep.num_words();
    let eos = g.constant(Tensor::matrix(1, ep.dim(), ep.eos().to_vec())?);
    let words = g.constant(ep.words());
    let logits = g.matmul(words, vars.word_weight)?;
    let logits = g.add_row(logits, vars.word_bias)?;
    let logits = g.reshape(logits, vec![1, l])?;
    let a = g.softmax_rows(logits, tau)?;
    let word_weights = g.reshape(a, vec![l])?;
    Ok(QueryVars { eos, words, word_weights })
}

/// Graph handles for one pair score.
#[derive(Clone, Debug)]
pub struct PairVars {
    pub coarse: Var,
    pub w2f: Var,
    pub f2w: Var,
    pub total: Var,
    pub selection: FilterSelection,
}

pub fn pair_score_graph(g: &mut Graph, q: &QueryVars, features: Var, mode: FilterMode, tau: f64) -> Result<PairVars> {
    let f = filter_graph(g, q.eos, features, mode, tau)?;
    let pooled = g.matmul(f.weights, f.rows)?;
    let coarse = g.cosine_rows(q.eos, pooled)?;
    let coarse = g.reshape(coarse, Vec::new())?;

    let m = g.cosine_rows(f.rows, q.words)?;
    let per_feature = g.max_axis(m, 1)?;
    let w2f = g.dot(f.weights, per_feature)?;
    let per_word = g.max_axis(m, 0)?;
    let f2w = g.dot(q.word_weights, per_word)?;

    let s = g.add(coarse, w2f)?;
    let s = g.add(s, f2w)?;
    let total = g.scale(s, 0.5)?;
    Ok(PairVars { coarse, w2f, f2w, total, selection: f.selection })
}

impl PairVars {
    pub fn score(&self, g: &Graph) -> PairScore {
        let (s_coarse, s_w2f, s_f2w) =
            (g.value(self.coarse).item(), g.value(self.w2f).item(), g.value(self.f2w).item());
        PairScore { s_coarse, s_w2f, s_f2w, s_fine: s_w2f + s_f2w, s_final: g.value(self.total).item() }
    }
}

/// Scores one query against one enhanced candidate sequence.
pub fn pair_score(
    params: &ModelParams,
    query: &Episode,
    features: &Tensor,
    mode: FilterMode,
    tau: f64,
) -> Result<(PairScore, FilterSelection)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let q = query_graph(&mut g, &vars, query, tau)?;
    let f = g.constant(features.clone());
    let pv = pair_score_graph(&mut g, &q, f, mode, tau)?;
    Ok((pv.score(&g), pv.selection))
}

/// Query-video and query-narration score matrices (row = query, column =
/// candidate). Not symmetric in general.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrices {
    pub qv: Tensor,
    pub qn: Tensor,
}

/// Builds `S_qv` and `S_qn` inside a graph from per-episode enhanced
/// features. Filtering runs once per (query, candidate) pair.
pub fn similarity_graph(
    g: &mut Graph,
    queries: &[QueryVars],
    v_check: &[Var],
    n_check: &[Var],
    mode: FilterMode,
    tau: f64,
) -> Result<(Var, Var)> {
    let b = queries.len();
    if v_check.len() != b || n_check.len() != b {
        return Err(NarvidError::Shape(format!("{b} queries but {} / {} candidates", v_check.len(), n_check.len())));
    }
    let mut qv = Vec::with_capacity(b * b);
    let mut qn = Vec::with_capacity(b * b);
    for q in queries {
        for j in 0..b {
            qv.push(pair_score_graph(g, q, v_check[j], mode, tau)?.total);
            qn.push(pair_score_graph(g, q, n_check[j], mode, tau)?.total);
        }
    }
    Ok((g.stack(&qv, vec![b, b])?, g.stack(&qn, vec![b, b])?))
}

/// Enhances every episode once, then scores all query/candidate pairs.
pub fn similarity_matrices(
    params: &ModelParams,
    episodes: &[Episode],
    mode: FilterMode,
    tau: f64,
) -> Result<SimilarityMatrices> {
    let enhanced: Vec<EnhancedFeatures> =
        episodes.par_iter().map(|ep| params.enhance_episode(ep)).collect::<Result<_>>()?;
    score_matrices(params, episodes, &enhanced, mode, tau)
}

/// Scores all pairs given precomputed enhanced features.
pub fn score_matrices(
    params: &ModelParams,
    episodes: &[Episode],
    enhanced: &[EnhancedFeatures],
    mode: FilterMode,
    tau: f64,
) -> Result<SimilarityMatrices> {
    let n = episodes.len();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = episodes
        .par_iter()
        .map(|query| {
            let mut g = Graph::new();
            let vars = params.bind(&mut g, false);
            let q = query_graph(&mut g, &vars, query, tau)?;
            let mut qv = Vec::with_capacity(n);
            let mut qn = Vec::with_capacity(n);
            for e in enhanced {
                let v = g.constant(e.v_check.clone());
                let c = g.constant(e.n_check.clone());
                let sv = pair_score_graph(&mut g, &q, v, mode, tau)?.total;
                let sn = pair_score_graph(&mut g, &q, c, mode, tau)?.total;
                qv.push(g.value(sv).item());
                qn.push(g.value(sn).item());
            }
            Ok((qv, qn))
        })
        .collect::<Result<_>>()?;
    let (qv, qn): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(SimilarityMatrices { qv: Tensor::matrix(n, n, qv.concat())?, qn: Tensor::matrix(n, n, qn.concat())? })
}
