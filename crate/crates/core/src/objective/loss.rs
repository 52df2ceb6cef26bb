use serde::Serialize;

use crate::error::{NarvidError, Result};
use crate::numerics::kernels::mean_std;
use crate::numerics::{Graph, Tensor, Var};

/// Which hard-negative term is added to the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HardLoss {
    /// Hinge rank loss with margin `eta * lambda * sigma`.
    #[default]
    Hinge,
    /// InfoNCE with denominators restricted to the positive and the hard set.
    InfoNce,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub eta: f64,
    pub alpha: f64,
    pub tau: f64,
    pub hard_loss: HardLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.7, eta: 1.8, alpha: 1.0, tau: 0.1, hard_loss: HardLoss::Hinge }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda) && ok(self.eta) && ok(self.alpha)) {
            return Err(NarvidError::Config(format!(
                "lambda, eta and alpha must be finite and non-negative (got {}, {}, {})",
                self.lambda, self.eta, self.alpha
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(NarvidError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

fn square(s: &Tensor, what: &str) -> Result<usize> {
    if s.shape().len() != 2 || s.rows() != s.cols() {
        return Err(NarvidError::Shape(format!("{what} must be square, got {:?}", s.shape())));
    }
    Ok(s.rows())
}

/// Hard-negative index sets for one batch, row direction (query to
/// candidate) and column direction (candidate to query). Every set is
/// sorted ascending.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HardNegativeSets {
    pub qv: Vec<Vec<usize>>,
    pub qn: Vec<Vec<usize>>,
    /// `H_i`: union of the two row sets.
    pub unified: Vec<Vec<usize>>,
    pub vq: Vec<Vec<usize>>,
    pub nq: Vec<Vec<usize>>,
    /// `H_i^T`: union of the two column sets.
    pub unified_t: Vec<Vec<usize>>,
    pub sigma_qv: Vec<f64>,
    pub sigma_qn: Vec<f64>,
    pub sigma_vq: Vec<f64>,
    pub sigma_nq: Vec<f64>,
}

impl HardNegativeSets {
    /// Mean size of `H_i` over the batch.
    pub fn mean_size(&self) -> f64 {
        if self.unified.is_empty() {
            return 0.0;
        }
        self.unified.iter().map(Vec::len).sum::<usize>() as f64 / self.unified.len() as f64
    }
}

/// Row-wise sets `{j != i : S[i][i] - S[i][j] < lambda * std(row i)}`
/// with the population std of each full row.
fn row_sets(s: &Tensor, lambda: f64) -> (Vec<Vec<usize>>, Vec<f64>) {
    let b = s.rows();
    let mut sets = Vec::with_capacity(b);
    let mut sigmas = Vec::with_capacity(b);
    for i in 0..b {
        let row = s.row(i);
        let sigma = mean_std(row).1;
        let threshold = lambda * sigma;
        sets.push((0..b).filter(|&j| j != i && row[i] - row[j] < threshold).collect());
        sigmas.push(sigma);
    }
    (sets, sigmas)
}

fn union(a: &[Vec<usize>], b: &[Vec<usize>]) -> Vec<Vec<usize>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let mut u: Vec<usize> = x.iter().chain(y).copied().collect();
            u.sort_unstable();
            u.dedup();
            u
        })
        .collect()
}

/// Cross-view hard negatives from detached score matrices.
pub fn hard_sets(s_qv: &Tensor, s_qn: &Tensor, lambda: f64) -> Result<HardNegativeSets> {
    let b = square(s_qv, "S_qv")?;
    if square(s_qn, "S_qn")? != b {
        return Err(NarvidError::Shape(format!("S_qv is {b}x{b} but S_qn is {:?}", s_qn.shape())));
    }
    let (qv, sigma_qv) = row_sets(s_qv, lambda);
    let (qn, sigma_qn) = row_sets(s_qn, lambda);
    let (vq, sigma_vq) = row_sets(&s_qv.transpose(), lambda);
    let (nq, sigma_nq) = row_sets(&s_qn.transpose(), lambda);
    Ok(HardNegativeSets {
        unified: union(&qv, &qn),
        unified_t: union(&vq, &nq),
        qv,
        qn,
        vq,
        nq,
        sigma_qv,
        sigma_qn,
        sigma_vq,
        sigma_nq,
    })
}

fn graph_square(g: &Graph, s: Var) -> Result<usize> {
    square(g.value(s), "score matrix")
}

/// Symmetric InfoNCE of one score matrix:
/// `(1/2B) sum_i [lse(S[i,:]/tau) + lse(S[:,i]/tau) - 2 S[i,i]/tau]`.
pub fn info_nce_graph(g: &mut Graph, s: Var, tau: f64) -> Result<Var> {
    let b = graph_square(g, s)?;
    let scaled = g.scale(s, 1.0 / tau)?;
    let mut lses = Vec::with_capacity(2 * b);
    for i in 0..b {
        let row = g.gather(scaled, &(0..b).map(|j| i * b + j).collect::<Vec<_>>())?;
        lses.push(g.log_sum_exp(row)?);
        let col = g.gather(scaled, &(0..b).map(|j| j * b + i).collect::<Vec<_>>())?;
        lses.push(g.log_sum_exp(col)?);
    }
    let lse = g.stack(&lses, vec![2 * b])?;
    let lse = g.sum(lse)?;
    let diag = g.gather(scaled, &(0..b).map(|i| i * b + i).collect::<Vec<_>>())?;
    let diag = g.sum(diag)?;
    let diag = g.scale(diag, 2.0)?;
    let total = g.sub(lse, diag)?;
    g.scale(total, 1.0 / (2 * b) as f64)
}

/// Hinge rank loss of one matrix over the unified sets. Margins use the
/// row std (query direction) and column std (candidate direction) of this
/// matrix and stay differentiable; set membership does not. Only active
/// hinges enter the graph, which gives the same value and subgradient as
/// `max(0, .)`.
pub fn hard_rank_loss_graph(g: &mut Graph, s: Var, sets: &HardNegativeSets, lambda: f64, eta: f64) -> Result<Var> {
    let b = graph_square(g, s)?;
    let st = g.transpose(s)?;
    let row_std = g.std_rows(s)?;
    let col_std = g.std_rows(st)?;
    let value = g.value(s).clone();
    let (rows, cols) = (g.value(row_std).data().to_vec(), g.value(col_std).data().to_vec());
    let (mut plus, mut minus, mut row_hits, mut col_hits) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..b {
        let diag = value.get(i, i);
        for &j in &sets.unified[i] {
            if value.get(i, j) - diag + eta * lambda * rows[i] > 0.0 {
                plus.push(i * b + j);
                minus.push(i * b + i);
                row_hits.push(i);
            }
        }
        for &j in &sets.unified_t[i] {
            if value.get(j, i) - diag + eta * lambda * cols[i] > 0.0 {
                plus.push(j * b + i);
                minus.push(i * b + i);
                col_hits.push(i);
            }
        }
    }
    let p = g.gather(s, &plus)?;
    let p = g.sum(p)?;
    let m = g.gather(s, &minus)?;
    let m = g.sum(m)?;
    let r = g.gather(row_std, &row_hits)?;
    let r = g.sum(r)?;
    let c = g.gather(col_std, &col_hits)?;
    let c = g.sum(c)?;
    let margins = g.add(r, c)?;
    let margins = g.scale(margins, eta * lambda)?;
    let d = g.sub(p, m)?;
    let d = g.add(d, margins)?;
    g.scale(d, 1.0 / (2 * b) as f64)
}

/// Restricted-denominator InfoNCE of one matrix: each row (column) term
/// normalizes over the positive plus its hard set only.
pub fn hard_info_nce_graph(g: &mut Graph, s: Var, sets: &HardNegativeSets, tau: f64) -> Result<Var> {
    let b = graph_square(g, s)?;
    let scaled = g.scale(s, 1.0 / tau)?;
    let mut terms = Vec::with_capacity(2 * b);
    for i in 0..b {
        let diag = i * b + i;
        let row: Vec<usize> = std::iter::once(diag).chain(sets.unified[i].iter().map(|&j| i * b + j)).collect();
        let col: Vec<usize> = std::iter::once(diag).chain(sets.unified_t[i].iter().map(|&j| j * b + i)).collect();
        for idx in [row, col] {
            let x = g.gather(scaled, &idx)?;
            let lse = g.log_sum_exp(x)?;
            let pos = g.gather(scaled, &[diag])?;
            let pos = g.sum(pos)?;
            terms.push(g.sub(lse, pos)?);
        }
    }
    let t = g.stack(&terms, vec![2 * b])?;
    let t = g.sum(t)?;
    g.scale(t, 1.0 / (2 * b) as f64)
}

/// Graph handles for the loss terms of one batch.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l_nce: Var,
    /// Absent when `alpha == 0`.
    pub l_hard: Option<Var>,
    pub sets: HardNegativeSets,
}

/// `L_NCE + alpha * L_hard`. With `alpha == 0` the hard term is not built
/// and the total is the `L_NCE` node itself.
pub fn total_loss_graph(g: &mut Graph, s_qv: Var, s_qn: Var, cfg: &LossConfig) -> Result<LossVars> {
    cfg.validate()?;
    let sets = hard_sets(g.value(s_qv), g.value(s_qn), cfg.lambda)?;
    let a = info_nce_graph(g, s_qv, cfg.tau)?;
    let b = info_nce_graph(g, s_qn, cfg.tau)?;
    let sum = g.add(a, b)?;
    let l_nce = g.scale(sum, 0.5)?;
    if cfg.alpha == 0.0 {
        return Ok(LossVars { total: l_nce, l_nce, l_hard: None, sets });
    }
    let l_hard = match cfg.hard_loss {
        HardLoss::Hinge => {
            let a = hard_rank_loss_graph(g, s_qv, &sets, cfg.lambda, cfg.eta)?;
            let b = hard_rank_loss_graph(g, s_qn, &sets, cfg.lambda, cfg.eta)?;
            g.add(a, b)?
        }
        HardLoss::InfoNce => {
            let a = hard_info_nce_graph(g, s_qv, &sets, cfg.tau)?;
            let b = hard_info_nce_graph(g, s_qn, &sets, cfg.tau)?;
            let sum = g.add(a, b)?;
            g.scale(sum, 0.5)?
        }
    };
    let weighted = g.scale(l_hard, cfg.alpha)?;
    let total = g.add(l_nce, weighted)?;
    Ok(LossVars { total, l_nce, l_hard: Some(l_hard), sets })
}

/// Evaluated loss terms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub l_nce: f64,
    /// `L_CVH` (or the restricted InfoNCE term); 0 when `alpha == 0`.
    pub l_hard: f64,
    pub hard_mean: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.value(self.total).item(),
            l_nce: g.value(self.l_nce).item(),
            l_hard: self.l_hard.map_or(0.0, |v| g.value(v).item()),
            hard_mean: self.sets.mean_size(),
        }
    }
}

fn eval_scalar(s: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(s.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).item())
}

pub fn info_nce(s: &Tensor, tau: f64) -> Result<f64> {
    square(s, "score matrix")?;
    eval_scalar(s, |g, v| info_nce_graph(g, v, tau))
}

pub fn hard_rank_loss(s: &Tensor, sets: &HardNegativeSets, lambda: f64, eta: f64) -> Result<f64> {
    square(s, "score matrix")?;
    eval_scalar(s, |g, v| hard_rank_loss_graph(g, v, sets, lambda, eta))
}

pub fn hard_info_nce(s: &Tensor, sets: &HardNegativeSets, tau: f64) -> Result<f64> {
    square(s, "score matrix")?;
    eval_scalar(s, |g, v| hard_info_nce_graph(g, v, sets, tau))
}

pub fn total_loss(s_qv: &Tensor, s_qn: &Tensor, cfg: &LossConfig) -> Result<LossValues> {
    let mut g = Graph::new();
    let a = g.constant(s_qv.clone());
    let b = g.constant(s_qn.clone());
    let lv = total_loss_graph(&mut g, a, b, cfg)?;
    Ok(lv.values(&g))
}
