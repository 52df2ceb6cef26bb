use serde::{Deserialize, Serialize};

use super::loss::{total_loss_graph, HardLoss, LossConfig, LossValues, LossVars};
use super::optim::{lr_at, warmup_steps, Adam};
use crate::dataio::{batch_iter, Dataset, Episode};
use crate::error::{NarvidError, Result};
use crate::filtering::FilterMode;
use crate::matching::{query_graph, similarity_graph};
use crate::model::{enhance, ModelConfig, ModelParams, ModelVars, ParamTree};
use crate::numerics::{Graph, Tensor, Var};

/// Training hyperparameters. Every key is optional in the JSON form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub p: f64,
    /// Replaces nucleus filtering with top-k selection when set.
    pub top_k: Option<usize>,
    pub lambda: f64,
    pub eta: f64,
    pub alpha: f64,
    pub tau: f64,
    pub lr: f64,
    /// Warm-up proportion of the total step count.
    pub warmup: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub heads: usize,
    pub seed: u64,
    pub hard_loss: HardLoss,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p: 0.4,
            top_k: None,
            lambda: 0.7,
            eta: 1.8,
            alpha: 1.0,
            tau: 0.1,
            lr: 1e-4,
            warmup: 0.1,
            epochs: 30,
            batch_size: 16,
            heads: 4,
            seed: 0,
            hard_loss: HardLoss::Hinge,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn filter_mode(&self) -> FilterMode {
        match self.top_k {
            Some(k) => FilterMode::TopK(k),
            None => FilterMode::Nucleus(self.p),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda: self.lambda, eta: self.eta, alpha: self.alpha, tau: self.tau, hard_loss: self.hard_loss }
    }

    pub fn validate(&self) -> Result<()> {
        self.filter_mode().validate()?;
        self.loss_config().validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(NarvidError::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(NarvidError::Config(format!("warmup proportion must lie in [0, 1], got {}", self.warmup)));
        }
        if self.batch_size == 0 || self.heads == 0 {
            return Err(NarvidError::Config("batch_size and heads must be positive".into()));
        }
        Ok(())
    }

    /// Parses a JSON config; absent keys keep their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| NarvidError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub l_nce: f64,
    pub l_cvh: f64,
    pub hard_mean: f64,
}

/// Forward pass of one batch through enhancement, matching and the loss.
pub fn batch_loss(
    g: &mut Graph,
    vars: &ModelVars,
    heads: usize,
    episodes: &[&Episode],
    mode: FilterMode,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let mut queries = Vec::with_capacity(episodes.len());
    let mut v_check = Vec::with_capacity(episodes.len());
    let mut n_check = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let frames = g.constant(ep.frames.clone());
        let captions = g.constant(ep.captions.clone());
        let e = enhance(g, vars, heads, frames, captions)?;
        v_check.push(e.v_check);
        n_check.push(e.n_check);
        queries.push(query_graph(g, vars, ep, cfg.tau)?);
    }
    let (s_qv, s_qn) = similarity_graph(g, &queries, &v_check, &n_check, mode, cfg.tau)?;
    total_loss_graph(g, s_qv, s_qn, cfg)
}

fn leaf_vars(vars: &ModelVars) -> Vec<Var> {
    let mut out = Vec::new();
    vars.for_each(&mut |_, &v| out.push(v));
    out
}

/// Loss and gradients of every parameter leaf (tree order) on one batch.
pub fn loss_and_grads(
    params: &ModelParams,
    episodes: &[&Episode],
    cfg: &TrainConfig,
) -> Result<(LossValues, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let lv = batch_loss(&mut g, &vars, params.config.heads, episodes, cfg.filter_mode(), &cfg.loss_config())?;
    g.backward(lv.total)?;
    let grads = leaf_vars(&vars)
        .into_iter()
        .map(|v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
        .collect();
    Ok((lv.values(&g), grads))
}

/// One optimizer step on one batch.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    episodes: &[&Episode],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossValues> {
    let (values, grads) = loss_and_grads(params, episodes, cfg)?;
    if !values.total.is_finite() {
        return Err(NarvidError::Numeric(format!("loss is {}", values.total)));
    }
    let mut leaves: Vec<Tensor> = params.flatten().into_iter().map(|(_, t)| t).collect();
    opt.step(&mut leaves, &grads, lr);
    if let Some(bad) = leaves.iter().flat_map(|t| t.data()).find(|v| !v.is_finite()) {
        return Err(NarvidError::Numeric(format!("parameter update produced {bad}")));
    }
    *params = ModelParams::from_flat(params.config, leaves)?;
    Ok(values)
}

/// Model shape implied by a dataset and config.
pub fn model_config_for(ds: &Dataset, cfg: &TrainConfig) -> Result<ModelConfig> {
    ModelConfig::new(ds.dim(), cfg.heads, ds.max_frames().max(1))
}

/// Failure inside the training loop. `last_good` holds the parameters
/// from before the failing step (absent if setup failed).
#[derive(Debug)]
pub struct TrainFailure {
    pub error: NarvidError,
    pub step: usize,
    pub epoch: u64,
    pub batch: Vec<usize>,
    pub last_good: Option<ModelParams>,
}

impl From<NarvidError> for Box<TrainFailure> {
    fn from(error: NarvidError) -> Self {
        Box::new(TrainFailure { error, step: 0, epoch: 0, batch: Vec::new(), last_good: None })
    }
}

/// Runs the full schedule from a seeded init. `log` sees every step.
pub fn train(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut log: impl FnMut(&StepLog),
) -> std::result::Result<ModelParams, Box<TrainFailure>> {
    cfg.validate()?;
    let mut params = ModelParams::init(model_config_for(ds, cfg)?, cfg.seed)?;
    let batches = batch_iter(ds.len(), cfg.batch_size, cfg.seed, cfg.shuffle, cfg.epochs as u64)?;
    let total = ds.len() / cfg.batch_size * cfg.epochs;
    let warm = warmup_steps(cfg.warmup, total);
    let sizes: Vec<usize> = params.flatten().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Adam::new(&sizes);
    for (t, (epoch, batch)) in batches.enumerate() {
        let step = t + 1;
        let lr = lr_at(cfg.lr, step, total, warm);
        let episodes: Vec<&Episode> = batch.indices.iter().map(|&i| &ds.episodes()[i]).collect();
        let before = params.clone();
        match train_step(&mut params, &mut opt, &episodes, cfg, lr) {
            Ok(v) => log(&StepLog {
                step,
                epoch,
                lr,
                loss: v.total,
                l_nce: v.l_nce,
                l_cvh: v.l_hard,
                hard_mean: v.hard_mean,
            }),
            Err(error) => {
                let last_good = Some(before);
                return Err(Box::new(TrainFailure { error, step, epoch, batch: batch.indices, last_good }));
            }
        }
    }
    Ok(params)
}
