//! First-order MAML on a one-hidden-layer ReLU network.
//!
//! The inner loop adapts a copy of the shared initialization to an episode's
//! support set with plain gradient steps. The outer loop averages, over a
//! meta-batch, the query-loss gradient taken at each adapted copy and applies
//! it to the initialization; no second-order terms are formed.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::DatasetTable;
use crate::heads::argmax;
use crate::rng::RngState;
use crate::sampler::{sample_episode, Episode, EpisodeSpec, LabeledExample, SamplerError};

#[derive(Debug, Error)]
pub enum FomamlError {
    #[error("loss became non-finite")]
    NonFinite,
    #[error("label {label} outside 0..{n_way}")]
    Label { label: usize, n_way: usize },
    #[error("input has dimension {found}, network expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("training log: {0}")]
    Log(#[from] std::io::Error),
    #[error("cancelled after {epochs} epochs")]
    Cancelled { epochs: usize },
}

/// `logits = w2 · relu(w1 · x + b1) + b2`; matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub dim: usize,
    pub hidden: usize,
    pub n_way: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(dim: usize, hidden: usize, n_way: usize) -> Self {
        Self {
            dim,
            hidden,
            n_way,
            w1: vec![0.0; hidden * dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; n_way * hidden],
            b2: vec![0.0; n_way],
        }
    }

    /// Every entry uniform in `±1/sqrt(fan_in)` of its layer.
    pub fn init(dim: usize, hidden: usize, n_way: usize, rng: &mut RngState) -> Self {
        let mut p = Self::zeros(dim, hidden, n_way);
        let s1 = 1.0 / (dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        for x in p.w1.iter_mut().chain(p.b1.iter_mut()) {
            *x = s1 * (2.0 * rng.unit_f64() - 1.0);
        }
        for x in p.w2.iter_mut().chain(p.b2.iter_mut()) {
            *x = s2 * (2.0 * rng.unit_f64() - 1.0);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &MlpParams) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }

    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|h| {
                self.b1[h]
                    + self.w1[h * self.dim..(h + 1) * self.dim]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    fn output(&self, act: &[f64]) -> Vec<f64> {
        (0..self.n_way)
            .map(|c| {
                self.b2[c]
                    + self.w2[c * self.hidden..(c + 1) * self.hidden]
                        .iter()
                        .zip(act)
                        .map(|(w, a)| w * a)
                        .sum::<f64>()
            })
            .collect()
    }
}

pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Vec<f64> {
    let act: Vec<f64> = params.hidden_pre(x).into_iter().map(|z| z.max(0.0)).collect();
    params.output(&act)
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(
    params: &MlpParams,
    batch: &[(&[f64], usize)],
) -> Result<(f64, MlpParams), FomamlError> {
    if batch.is_empty() {
        return Err(FomamlError::EmptyBatch);
    }
    let mut grad = MlpParams::zeros(params.dim, params.hidden, params.n_way);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &(x, y) in batch {
        if x.len() != params.dim {
            return Err(FomamlError::Dimension {
                expected: params.dim,
                found: x.len(),
            });
        }
        if y >= params.n_way {
            return Err(FomamlError::Label {
                label: y,
                n_way: params.n_way,
            });
        }
        let pre = params.hidden_pre(x);
        let act: Vec<f64> = pre.iter().map(|z| z.max(0.0)).collect();
        let logits = params.output(&act);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += (lse - logits[y]) * scale;

        let mut d_act = vec![0.0; params.hidden];
        for c in 0..params.n_way {
            let d = ((logits[c] - lse).exp() - if c == y { 1.0 } else { 0.0 }) * scale;
            grad.b2[c] += d;
            let row = c * params.hidden..(c + 1) * params.hidden;
            for ((g, w), (a, da)) in grad.w2[row.clone()]
                .iter_mut()
                .zip(&params.w2[row])
                .zip(act.iter().zip(d_act.iter_mut()))
            {
                *g += d * a;
                *da += d * w;
            }
        }
        for h in 0..params.hidden {
            if pre[h] <= 0.0 {
                continue;
            }
            let d = d_act[h];
            grad.b1[h] += d;
            for (g, v) in grad.w1[h * params.dim..(h + 1) * params.dim].iter_mut().zip(x) {
                *g += d * v;
            }
        }
    }
    if !loss.is_finite() {
        return Err(FomamlError::NonFinite);
    }
    Ok((loss, grad))
}

fn as_batch(examples: &[LabeledExample]) -> Vec<(&[f64], usize)> {
    examples.iter().map(|e| (e.features.as_slice(), e.label)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self { steps: 5, lr: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterConfig {
    pub lr: f64,
    pub meta_batch: usize,
    pub epochs: usize,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            meta_batch: 32,
            epochs: 300,
        }
    }
}

/// `steps` full-batch gradient-descent updates on the support loss.
pub fn inner_adapt(
    params: &MlpParams,
    support: &[LabeledExample],
    config: &InnerConfig,
) -> Result<MlpParams, FomamlError> {
    let batch = as_batch(support);
    let mut adapted = params.clone();
    for _ in 0..config.steps {
        let (_, grad) = loss_and_grad(&adapted, &batch)?;
        adapted.axpy(-config.lr, &grad);
    }
    Ok(adapted)
}

/// Labels of `query` under `params` (argmax logits, lowest label on ties).
pub fn mlp_predict(params: &MlpParams, query: &[Vec<f64>]) -> Vec<usize> {
    query.iter().map(|x| argmax(&mlp_forward(params, x))).collect()
}

/// Post-adaptation query loss and accuracy averaged over a meta-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaStepStats {
    pub query_loss: f64,
    pub query_acc: f64,
}

/// One first-order outer update; also reports the query statistics seen at
/// the adapted parameters.
pub fn fo_meta_step_with_stats(
    params: &MlpParams,
    episodes: &[Episode],
    inner: &InnerConfig,
    outer_lr: f64,
) -> Result<(MlpParams, MetaStepStats), FomamlError> {
    if episodes.is_empty() {
        return Err(FomamlError::EmptyBatch);
    }
    if let Some(ep) = episodes.iter().find(|e| e.n_way() != params.n_way) {
        return Err(FomamlError::Config(format!(
            "episode is {}-way, network head is {}-way",
            ep.n_way(),
            params.n_way
        )));
    }
    let per_episode: Vec<(f64, f64, MlpParams)> = episodes
        .par_iter()
        .map(|ep| {
            let adapted = inner_adapt(params, &ep.support, inner)?;
            let (loss, grad) = loss_and_grad(&adapted, &as_batch(&ep.query))?;
            let predicted = mlp_predict(&adapted, &ep.query_features());
            let correct = predicted
                .iter()
                .zip(&ep.query)
                .filter(|(p, q)| **p == q.label)
                .count();
            Ok((loss, correct as f64 / ep.query.len() as f64, grad))
        })
        .collect::<Result<_, FomamlError>>()?;

    let scale = 1.0 / episodes.len() as f64;
    let mut mean_grad = MlpParams::zeros(params.dim, params.hidden, params.n_way);
    let mut stats = MetaStepStats {
        query_loss: 0.0,
        query_acc: 0.0,
    };
    for (loss, acc, grad) in &per_episode {
        mean_grad.axpy(scale, grad);
        stats.query_loss += loss * scale;
        stats.query_acc += acc * scale;
    }
    let mut next = params.clone();
    next.axpy(-outer_lr, &mean_grad);
    Ok((next, stats))
}

pub fn fo_meta_step(
    params: &MlpParams,
    episodes: &[Episode],
    inner: &InnerConfig,
    outer_lr: f64,
) -> Result<MlpParams, FomamlError> {
    fo_meta_step_with_stats(params, episodes, inner, outer_lr).map(|(p, _)| p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoMamlConfig {
    pub hidden: usize,
    pub inner: InnerConfig,
    pub outer: OuterConfig,
    pub episode_spec: EpisodeSpec,
}

impl Default for FoMamlConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            inner: InnerConfig::default(),
            outer: OuterConfig::default(),
            episode_spec: EpisodeSpec::five_way_one_shot(),
        }
    }
}

impl FoMamlConfig {
    pub fn validate(&self) -> Result<(), FomamlError> {
        if self.hidden == 0 {
            return Err(FomamlError::Config("hidden width must be positive".into()));
        }
        if !(self.inner.lr > 0.0) || !(self.outer.lr > 0.0) {
            return Err(FomamlError::Config("learning rates must be positive".into()));
        }
        if self.outer.meta_batch == 0 {
            return Err(FomamlError::Config("meta_batch must be positive".into()));
        }
        self.episode_spec.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub query_loss: f64,
    pub query_acc: f64,
}

pub fn initial_params(dim: usize, config: &FoMamlConfig, seed: u64) -> MlpParams {
    let mut rng = RngState::new(seed).fork(0);
    MlpParams::init(dim, config.hidden, config.episode_spec.n_way, &mut rng)
}

/// Outer loop over freshly sampled meta-batches. Epoch `e` draws its
/// episodes from substreams of `seed`, so the run is a function of
/// `(table, config, seed)`. `should_stop` is polled between epochs.
pub fn meta_train(
    table: &DatasetTable,
    config: &FoMamlConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
    should_stop: &dyn Fn() -> bool,
) -> Result<(MlpParams, Vec<EpochLog>), FomamlError> {
    config.validate()?;
    let mut params = initial_params(table.dim(), config, seed);
    let episodes_root = RngState::new(seed).fork(1);
    let mut history = Vec::with_capacity(config.outer.epochs);
    for epoch in 0..config.outer.epochs {
        if should_stop() {
            return Err(FomamlError::Cancelled { epochs: epoch });
        }
        let epoch_rng = episodes_root.fork(epoch as u64);
        let episodes = (0..config.outer.meta_batch)
            .map(|j| sample_episode(table, &config.episode_spec, &mut epoch_rng.fork(j as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let (next, stats) = fo_meta_step_with_stats(&params, &episodes, &config.inner, config.outer.lr)?;
        params = next;
        let entry = EpochLog {
            epoch,
            query_loss: stats.query_loss,
            query_acc: stats.query_acc,
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{},{},{}", entry.epoch, entry.query_loss, entry.query_acc)?;
        }
        history.push(entry);
    }
    Ok((params, history))
}
