//! The meta-learner / learner / predictor contract shared by every method,
//! and the learner artifact handed from ingestion to scoring.
//!
//! `meta_fit` turns a meta-train pool into a [`LearnerState`]; `fit` adapts a
//! learner to one support set and returns a [`PredictorState`]; `predict`
//! labels query vectors. Neither `fit` nor `predict` can see meta-train data
//! or query labels.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::dataset::{parse_f64, render_f64, DatasetTable, FeatureVector};
use crate::fomaml::{self, FoMamlConfig, FomamlError, MlpParams};
use crate::heads::{
    self, HeadError, LinearHead, LinearHeadConfig, Metric, Prototypes, PtMapConfig, QdaModel,
};
use crate::rng::RngState;
use crate::sampler::{sample_balanced_batch, EpisodeSpec, LabeledExample, QueryCount, SamplerError};

pub const ARTIFACT_MAGIC: &str = "MDLART1";

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("episode format error: {0}")]
    EpisodeFormat(String),
    #[error("shape error: expected dimension {expected}, found {found}")]
    Shape { expected: usize, found: usize },
    #[error(transparent)]
    Head(HeadError),
    #[error(transparent)]
    Fomaml(FomamlError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("artifact version mismatch: found `{found}`, expected `{ARTIFACT_MAGIC}`")]
    ArtifactVersion { found: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("meta-training cancelled")]
    Cancelled,
}

impl From<HeadError> for ApiError {
    fn from(e: HeadError) -> Self {
        match e {
            HeadError::Structure(m) => ApiError::EpisodeFormat(m),
            HeadError::Dimension { expected, found } => ApiError::Shape { expected, found },
            other => ApiError::Head(other),
        }
    }
}

impl From<FomamlError> for ApiError {
    fn from(e: FomamlError) -> Self {
        match e {
            FomamlError::Cancelled { .. } => ApiError::Cancelled,
            FomamlError::Dimension { expected, found } => ApiError::Shape { expected, found },
            FomamlError::Sampler(s) => ApiError::Sampler(s),
            other => ApiError::Fomaml(other),
        }
    }
}

fn config_err(key: &str, value: &str) -> ApiError {
    ApiError::Config(format!("invalid value `{value}` for `{key}`"))
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ApiError> {
    value.trim().parse().map_err(|_| config_err(key, value))
}

fn parse_real(key: &str, value: &str) -> Result<f64, ApiError> {
    parse_f64(value).ok_or_else(|| config_err(key, value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    Episode,
    Batch,
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataMode::Episode => "episode",
            DataMode::Batch => "batch",
        })
    }
}

impl FromStr for DataMode {
    type Err = ApiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "episode" => Ok(DataMode::Episode),
            "batch" => Ok(DataMode::Batch),
            other => Err(ApiError::Config(format!("unknown data mode `{other}`"))),
        }
    }
}

/// Meta-training of the transfer head: balanced batches over the meta-train
/// pool fix the per-coordinate standardization applied before the
/// episode-time logistic head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferConfig {
    pub head: LinearHeadConfig,
    pub batch_per_class: usize,
    pub batches: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            head: LinearHeadConfig::default(),
            batch_per_class: 50,
            batches: 4,
        }
    }
}

/// Selects and parameterizes one method.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodConfig {
    ProtoHead { metric: Metric, temperature: f64 },
    PtMap(PtMapConfig),
    Qda { lambda: f64 },
    LinearHead(TransferConfig),
    RectifiedProto { metric: Metric, temperature: f64 },
    FoMaml(FoMamlConfig),
    /// Diagnostic method whose meta-training only waits; used to exercise
    /// the budget clock. Episode-time behaviour matches `ProtoHead`.
    Sleeper { seconds: f64 },
}

impl MethodConfig {
    pub const NAMES: [&'static str; 7] =
        ["proto", "ptmap", "qda", "linear", "rectified", "fomaml", "sleeper"];

    pub fn default_for(name: &str) -> Result<Self, ApiError> {
        Ok(match name.trim() {
            "proto" => MethodConfig::ProtoHead {
                metric: Metric::Euclidean,
                temperature: 1.0,
            },
            "ptmap" => MethodConfig::PtMap(PtMapConfig::default()),
            "qda" => MethodConfig::Qda { lambda: 0.5 },
            "linear" => MethodConfig::LinearHead(TransferConfig::default()),
            "rectified" => MethodConfig::RectifiedProto {
                metric: Metric::Euclidean,
                temperature: 1.0,
            },
            "fomaml" => MethodConfig::FoMaml(FoMamlConfig::default()),
            "sleeper" => MethodConfig::Sleeper { seconds: 1.0 },
            other => {
                return Err(ApiError::Config(format!(
                    "unknown method `{other}`; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::ProtoHead { .. } => "proto",
            MethodConfig::PtMap(_) => "ptmap",
            MethodConfig::Qda { .. } => "qda",
            MethodConfig::LinearHead(_) => "linear",
            MethodConfig::RectifiedProto { .. } => "rectified",
            MethodConfig::FoMaml(_) => "fomaml",
            MethodConfig::Sleeper { .. } => "sleeper",
        }
    }

    pub fn is_transductive(&self) -> bool {
        matches!(self, MethodConfig::PtMap(_) | MethodConfig::RectifiedProto { .. })
    }

    pub fn supports(&self, mode: DataMode) -> bool {
        match self {
            MethodConfig::FoMaml(_) | MethodConfig::ProtoHead { .. } => mode == DataMode::Episode,
            MethodConfig::LinearHead(_) => mode == DataMode::Batch,
            _ => true,
        }
    }

    /// The data mode a method gets when none is configured.
    pub fn default_data_mode(&self) -> DataMode {
        match self {
            MethodConfig::LinearHead(_) => DataMode::Batch,
            _ => DataMode::Episode,
        }
    }

    /// Sets one hyperparameter; `key` is relative to `method.<name>.`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ApiError> {
        let full = format!("method.{}.{key}", self.name());
        let unknown = || ApiError::Config(format!("unknown key `{full}`"));
        match self {
            MethodConfig::ProtoHead {
                metric,
                temperature,
            }
            | MethodConfig::RectifiedProto {
                metric,
                temperature,
            } => match key {
                "metric" => *metric = value.parse().map_err(|_| config_err(&full, value))?,
                "temperature" => *temperature = parse_real(&full, value)?,
                _ => return Err(unknown()),
            },
            MethodConfig::PtMap(c) => match key {
                "beta" => c.power.beta = parse_real(&full, value)?,
                "epsilon" => c.power.epsilon = parse_real(&full, value)?,
                "unit_normalize" => c.power.unit_normalize = parse_value(&full, value)?,
                "reg" => c.sinkhorn.reg = parse_real(&full, value)?,
                "max_iters" => c.sinkhorn.max_iters = parse_value(&full, value)?,
                "tol" => c.sinkhorn.tol = parse_real(&full, value)?,
                "n_iters" => c.n_iters = parse_value(&full, value)?,
                "step_size" => c.step_size = parse_real(&full, value)?,
                _ => return Err(unknown()),
            },
            MethodConfig::Qda { lambda } => match key {
                "lambda" => *lambda = parse_real(&full, value)?,
                _ => return Err(unknown()),
            },
            MethodConfig::LinearHead(c) => match key {
                "epochs" => c.head.epochs = parse_value(&full, value)?,
                "step_size" => c.head.step_size = parse_real(&full, value)?,
                "batch_per_class" => c.batch_per_class = parse_value(&full, value)?,
                "batches" => c.batches = parse_value(&full, value)?,
                _ => return Err(unknown()),
            },
            MethodConfig::FoMaml(c) => match key {
                "hidden" => c.hidden = parse_value(&full, value)?,
                "inner_steps" => c.inner.steps = parse_value(&full, value)?,
                "inner_lr" => c.inner.lr = parse_real(&full, value)?,
                "outer_lr" => c.outer.lr = parse_real(&full, value)?,
                "meta_batch" => c.outer.meta_batch = parse_value(&full, value)?,
                "epochs" => c.outer.epochs = parse_value(&full, value)?,
                _ => return Err(unknown()),
            },
            MethodConfig::Sleeper { seconds } => match key {
                "seconds" => *seconds = parse_real(&full, value)?,
                _ => return Err(unknown()),
            },
        }
        Ok(())
    }

    /// All hyperparameters as `(key, value)` pairs relative to
    /// `method.<name>.`, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let r = |x: f64| render_f64(x);
        match self {
            MethodConfig::ProtoHead {
                metric,
                temperature,
            }
            | MethodConfig::RectifiedProto {
                metric,
                temperature,
            } => vec![("metric", metric.to_string()), ("temperature", r(*temperature))],
            MethodConfig::PtMap(c) => vec![
                ("beta", r(c.power.beta)),
                ("epsilon", r(c.power.epsilon)),
                ("unit_normalize", c.power.unit_normalize.to_string()),
                ("reg", r(c.sinkhorn.reg)),
                ("max_iters", c.sinkhorn.max_iters.to_string()),
                ("tol", r(c.sinkhorn.tol)),
                ("n_iters", c.n_iters.to_string()),
                ("step_size", r(c.step_size)),
            ],
            MethodConfig::Qda { lambda } => vec![("lambda", r(*lambda))],
            MethodConfig::LinearHead(c) => vec![
                ("epochs", c.head.epochs.to_string()),
                ("step_size", r(c.head.step_size)),
                ("batch_per_class", c.batch_per_class.to_string()),
                ("batches", c.batches.to_string()),
            ],
            MethodConfig::FoMaml(c) => vec![
                ("hidden", c.hidden.to_string()),
                ("inner_steps", c.inner.steps.to_string()),
                ("inner_lr", r(c.inner.lr)),
                ("outer_lr", r(c.outer.lr)),
                ("meta_batch", c.outer.meta_batch.to_string()),
                ("epochs", c.outer.epochs.to_string()),
            ],
            MethodConfig::Sleeper { seconds } => vec![("seconds", r(*seconds))],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearnerSpec {
    pub method: MethodConfig,
    pub data_mode: DataMode,
    pub train_episode_spec: EpisodeSpec,
    pub budget_hint: Option<Duration>,
}

impl MetaLearnerSpec {
    pub fn new(method: MethodConfig) -> Self {
        let data_mode = method.default_data_mode();
        Self {
            method,
            data_mode,
            train_episode_spec: EpisodeSpec::new(5, 1, QueryCount::Fixed(15))
                .expect("valid default episode spec"),
            budget_hint: None,
        }
    }

    pub fn validate(&self) -> Result<(), ApiError> {
        if !self.method.supports(self.data_mode) {
            return Err(ApiError::Config(format!(
                "method `{}` does not accept {} mode",
                self.method.name(),
                self.data_mode
            )));
        }
        self.train_episode_spec.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LearnedParams {
    None,
    Mlp(MlpParams),
    Standardizer { mean: Vec<f64>, scale: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    /// Episodes or batches drawn from the meta-train pool.
    pub consumed: usize,
}

/// Output of meta-training.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub method: MethodConfig,
    pub params: LearnedParams,
    pub provenance: Provenance,
}

/// Meta-trains without a deadline or training log.
pub fn meta_fit(
    spec: &MetaLearnerSpec,
    meta_train: &DatasetTable,
    seed: u64,
) -> Result<LearnerState, ApiError> {
    meta_fit_with(spec, meta_train, seed, &|| false, None)
}

/// Meta-trains, polling `should_stop` between units of work.
pub fn meta_fit_with(
    spec: &MetaLearnerSpec,
    meta_train: &DatasetTable,
    seed: u64,
    should_stop: &dyn Fn() -> bool,
    log: Option<&mut dyn Write>,
) -> Result<LearnerState, ApiError> {
    spec.validate()?;
    let mut method = spec.method.clone();
    let (params, consumed) = match &mut method {
        MethodConfig::FoMaml(cfg) => {
            cfg.episode_spec = spec.train_episode_spec;
            let (params, history) = fomaml::meta_train(meta_train, cfg, seed, log, should_stop)?;
            (LearnedParams::Mlp(params), history.len() * cfg.outer.meta_batch)
        }
        MethodConfig::LinearHead(cfg) => {
            let per_class = meta_train
                .classes()
                .iter()
                .map(|c| c.examples.len())
                .min()
                .unwrap_or(0)
                .min(cfg.batch_per_class);
            let root = RngState::new(seed);
            let dim = meta_train.dim();
            let mut sum = vec![0.0; dim];
            let mut sum_sq = vec![0.0; dim];
            let mut count = 0.0;
            for b in 0..cfg.batches {
                if should_stop() {
                    return Err(ApiError::Cancelled);
                }
                let batch = sample_balanced_batch(meta_train, per_class, &mut root.fork(b as u64))?;
                for (x, _) in &batch.examples {
                    for j in 0..dim {
                        sum[j] += x[j];
                        sum_sq[j] += x[j] * x[j];
                    }
                    count += 1.0;
                }
            }
            if count == 0.0 {
                return Err(ApiError::Config("transfer head needs at least one batch".into()));
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
            let scale = sum_sq
                .iter()
                .zip(&mean)
                .map(|(sq, m)| {
                    let var = (sq / count - m * m).max(0.0);
                    if var > 0.0 {
                        var.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            (LearnedParams::Standardizer { mean, scale }, cfg.batches)
        }
        MethodConfig::Sleeper { seconds } => {
            let until = Instant::now() + Duration::from_secs_f64(seconds.max(0.0));
            while Instant::now() < until {
                if should_stop() {
                    return Err(ApiError::Cancelled);
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            (LearnedParams::None, 0)
        }
        _ => (LearnedParams::None, 0),
    };
    Ok(LearnerState {
        method,
        params,
        provenance: Provenance { seed, consumed },
    })
}

/// Checks the N·K support structure; returns `(n_way, k_shot, dim)`.
pub fn validate_support(support: &[LabeledExample]) -> Result<(usize, usize, usize), ApiError> {
    let g = heads::group_support(support)?;
    Ok((g.n_way(), g.k_shot(), g.dim))
}

#[derive(Debug)]
enum Transductive {
    PtMap(PtMapConfig),
    Rectified { metric: Metric, temperature: f64 },
}

#[derive(Debug)]
enum Adapted {
    Proto(Prototypes),
    Qda(QdaModel),
    Linear {
        head: LinearHead,
        mean: Vec<f64>,
        scale: Vec<f64>,
    },
    Mlp(MlpParams),
    Transductive {
        kind: Transductive,
        support: Vec<LabeledExample>,
        cache: Mutex<Option<(Vec<FeatureVector>, Vec<usize>)>>,
    },
}

/// A learner adapted to one episode. Predicts labels in `0..n_way`.
#[derive(Debug)]
pub struct PredictorState {
    method: &'static str,
    n_way: usize,
    dim: usize,
    adapted: Adapted,
}

fn standardize(x: &[f64], mean: &[f64], scale: &[f64]) -> FeatureVector {
    x.iter()
        .zip(mean)
        .zip(scale)
        .map(|((v, m), s)| (v - m) / s)
        .collect()
}

/// Adapts `learner` to one support set. The learner is not modified.
pub fn fit(learner: &LearnerState, support: &[LabeledExample]) -> Result<PredictorState, ApiError> {
    let (n_way, _, dim) = validate_support(support)?;
    let adapted = match (&learner.method, &learner.params) {
        (MethodConfig::ProtoHead { metric, temperature }, _) => {
            Adapted::Proto(heads::compute_prototypes(support, *metric, *temperature)?)
        }
        (MethodConfig::Sleeper { .. }, _) => {
            Adapted::Proto(heads::compute_prototypes(support, Metric::Euclidean, 1.0)?)
        }
        (MethodConfig::Qda { lambda }, _) => Adapted::Qda(heads::qda_fit(support, *lambda)?),
        (MethodConfig::LinearHead(cfg), LearnedParams::Standardizer { mean, scale }) => {
            if mean.len() != dim {
                return Err(ApiError::Shape {
                    expected: mean.len(),
                    found: dim,
                });
            }
            let standardized: Vec<LabeledExample> = support
                .iter()
                .map(|e| LabeledExample {
                    features: standardize(&e.features, mean, scale),
                    label: e.label,
                })
                .collect();
            Adapted::Linear {
                head: heads::linear_head_fit(&standardized, &cfg.head)?,
                mean: mean.clone(),
                scale: scale.clone(),
            }
        }
        (MethodConfig::FoMaml(cfg), LearnedParams::Mlp(params)) => {
            if params.dim != dim {
                return Err(ApiError::Shape {
                    expected: params.dim,
                    found: dim,
                });
            }
            if params.n_way != n_way {
                return Err(ApiError::EpisodeFormat(format!(
                    "support is {n_way}-way, network head is {}-way",
                    params.n_way
                )));
            }
            Adapted::Mlp(fomaml::inner_adapt(params, support, &cfg.inner)?)
        }
        (MethodConfig::PtMap(cfg), _) => Adapted::Transductive {
            kind: Transductive::PtMap(*cfg),
            support: support.to_vec(),
            cache: Mutex::new(None),
        },
        (MethodConfig::RectifiedProto { metric, temperature }, _) => Adapted::Transductive {
            kind: Transductive::Rectified {
                metric: *metric,
                temperature: *temperature,
            },
            support: support.to_vec(),
            cache: Mutex::new(None),
        },
        (method, _) => {
            return Err(ApiError::Artifact(format!(
                "learner for `{}` is missing its meta-trained parameters",
                method.name()
            )))
        }
    };
    Ok(PredictorState {
        method: learner.method.name(),
        n_way,
        dim,
        adapted,
    })
}

fn run_transductive(
    kind: &Transductive,
    support: &[LabeledExample],
    query: &[FeatureVector],
) -> Result<Vec<usize>, ApiError> {
    Ok(match kind {
        Transductive::PtMap(cfg) => heads::ptmap_fit_predict(support, query, cfg)?,
        Transductive::Rectified {
            metric,
            temperature,
        } => heads::rectified_proto_predict(support, query, *metric, *temperature)?,
    })
}

impl PredictorState {
    pub fn method(&self) -> &'static str {
        self.method
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn is_transductive(&self) -> bool {
        matches!(self.adapted, Adapted::Transductive { .. })
    }

    /// One label per query vector. Transductive heads treat `query` as the
    /// whole query set; the result for the most recent set is cached.
    pub fn predict(&self, query: &[FeatureVector]) -> Result<Vec<usize>, ApiError> {
        if let Some(q) = query.iter().find(|q| q.len() != self.dim) {
            return Err(ApiError::Shape {
                expected: self.dim,
                found: q.len(),
            });
        }
        if query.is_empty() {
            return Ok(Vec::new());
        }
        Ok(match &self.adapted {
            Adapted::Proto(p) => heads::nearest_labels(p, query)?,
            Adapted::Qda(m) => heads::qda_predict(m, query)?,
            Adapted::Linear { head, mean, scale } => {
                let standardized: Vec<FeatureVector> =
                    query.iter().map(|x| standardize(x, mean, scale)).collect();
                heads::linear_head_predict(head, &standardized)?
            }
            Adapted::Mlp(params) => fomaml::mlp_predict(params, query),
            Adapted::Transductive {
                kind,
                support,
                cache,
            } => {
                let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
                if let Some((cached_query, labels)) = guard.as_ref() {
                    if cached_query.as_slice() == query {
                        return Ok(labels.clone());
                    }
                }
                let labels = run_transductive(kind, support, query)?;
                *guard = Some((query.to_vec(), labels.clone()));
                labels
            }
        })
    }

    /// Label of a single vector. For transductive heads this is the label
    /// the vector received in the cached query-set result when present;
    /// otherwise the vector is treated as a query set of one.
    pub fn predict_one(&self, x: &[f64]) -> Result<usize, ApiError> {
        if let Adapted::Transductive { cache, .. } = &self.adapted {
            let guard = cache.lock().unwrap_or_else(|e| e.into_inner());
            if let Some((query, labels)) = guard.as_ref() {
                if let Some(i) = query.iter().position(|q| q.as_slice() == x) {
                    return Ok(labels[i]);
                }
            }
        }
        Ok(self.predict(&[x.to_vec()])?[0])
    }
}

/// Episode-time half of the contract, so evaluation can drive built-in and
/// test learners alike.
pub trait Learner: Sync {
    type Predictor: Predictor;

    fn fit(&self, support: &[LabeledExample]) -> Result<Self::Predictor, ApiError>;
}

pub trait Predictor {
    fn predict(&self, query: &[FeatureVector]) -> Result<Vec<usize>, ApiError>;
}

impl Learner for LearnerState {
    type Predictor = PredictorState;

    fn fit(&self, support: &[LabeledExample]) -> Result<PredictorState, ApiError> {
        fit(self, support)
    }
}

impl Predictor for PredictorState {
    fn predict(&self, query: &[FeatureVector]) -> Result<Vec<usize>, ApiError> {
        PredictorState::predict(self, query)
    }
}

pub fn predict(predictor: &PredictorState, query: &[FeatureVector]) -> Result<Vec<usize>, ApiError> {
    predictor.predict(query)
}

fn render_vec(values: &[f64]) -> String {
    values.iter().map(|v| render_f64(*v)).collect::<Vec<_>>().join(",")
}

/// Artifact text: magic line, method tag line, then `key=value` lines with
/// numeric payloads in the feature-table rendering, closed by `end`.
pub fn render_learner(learner: &LearnerState) -> String {
    let mut lines = vec![
        ARTIFACT_MAGIC.to_string(),
        format!("method={}", learner.method.name()),
        format!("seed={}", learner.provenance.seed),
        format!("consumed={}", learner.provenance.consumed),
    ];
    for (k, v) in learner.method.pairs() {
        lines.push(format!("config.{k}={v}"));
    }
    if let MethodConfig::FoMaml(cfg) = &learner.method {
        let spec = cfg.episode_spec;
        lines.push(format!("episode.n_way={}", spec.n_way));
        lines.push(format!("episode.k_shot={}", spec.k_shot));
        lines.push(format!("episode.query_per_class={}", spec.query_per_class));
    }
    match &learner.params {
        LearnedParams::None => lines.push("params=none".into()),
        LearnedParams::Mlp(p) => {
            lines.push("params=mlp".into());
            lines.push(format!("dim={}", p.dim));
            lines.push(format!("hidden={}", p.hidden));
            lines.push(format!("n_way={}", p.n_way));
            lines.push(format!("w1={}", render_vec(&p.w1)));
            lines.push(format!("b1={}", render_vec(&p.b1)));
            lines.push(format!("w2={}", render_vec(&p.w2)));
            lines.push(format!("b2={}", render_vec(&p.b2)));
        }
        LearnedParams::Standardizer { mean, scale } => {
            lines.push("params=standardizer".into());
            lines.push(format!("mean={}", render_vec(mean)));
            lines.push(format!("scale={}", render_vec(scale)));
        }
    }
    lines.push("end".into());
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

pub fn parse_learner(text: &str) -> Result<LearnerState, ApiError> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default().trim();
    if magic != ARTIFACT_MAGIC {
        if magic.starts_with("MDLART") {
            return Err(ApiError::ArtifactVersion {
                found: magic.to_string(),
            });
        }
        return Err(ApiError::Artifact(format!("bad magic header `{magic}`")));
    }
    let mut fields: Vec<(&str, &str)> = Vec::new();
    let mut ended = false;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "end" {
            ended = true;
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ApiError::Artifact(format!("malformed line `{line}`")))?;
        fields.push((k, v));
    }
    if !ended {
        return Err(ApiError::Artifact("truncated artifact: missing `end`".into()));
    }
    let get = |key: &str| -> Result<&str, ApiError> {
        fields
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| ApiError::Artifact(format!("missing field `{key}`")))
    };
    let art = |e: ApiError| ApiError::Artifact(e.to_string());
    let vector = |key: &str, len: usize| -> Result<Vec<f64>, ApiError> {
        let raw = get(key)?;
        let values = if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(',')
                .map(|t| parse_f64(t).ok_or_else(|| ApiError::Artifact(format!("bad number in `{key}`"))))
                .collect::<Result<Vec<_>, _>>()?
        };
        if values.len() != len {
            return Err(ApiError::Artifact(format!(
                "`{key}` has {} values, expected {len}",
                values.len()
            )));
        }
        Ok(values)
    };

    let mut method = MethodConfig::default_for(get("method")?).map_err(art)?;
    for (k, v) in &fields {
        if let Some(key) = k.strip_prefix("config.") {
            method.set(key, v).map_err(art)?;
        }
    }
    if let MethodConfig::FoMaml(cfg) = &mut method {
        cfg.episode_spec = EpisodeSpec::new(
            parse_value("episode.n_way", get("episode.n_way")?).map_err(art)?,
            parse_value("episode.k_shot", get("episode.k_shot")?).map_err(art)?,
            get("episode.query_per_class")?.parse().map_err(|e: SamplerError| ApiError::Artifact(e.to_string()))?,
        )
        .map_err(|e| ApiError::Artifact(e.to_string()))?;
    }
    let provenance = Provenance {
        seed: parse_value("seed", get("seed")?).map_err(art)?,
        consumed: parse_value("consumed", get("consumed")?).map_err(art)?,
    };
    let params = match get("params")? {
        "none" => LearnedParams::None,
        "mlp" => {
            let dim: usize = parse_value("dim", get("dim")?).map_err(art)?;
            let hidden: usize = parse_value("hidden", get("hidden")?).map_err(art)?;
            let n_way: usize = parse_value("n_way", get("n_way")?).map_err(art)?;
            LearnedParams::Mlp(MlpParams {
                dim,
                hidden,
                n_way,
                w1: vector("w1", hidden * dim)?,
                b1: vector("b1", hidden)?,
                w2: vector("w2", n_way * hidden)?,
                b2: vector("b2", n_way)?,
            })
        }
        "standardizer" => {
            let n = get("mean")?.split(',').count();
            LearnedParams::Standardizer {
                mean: vector("mean", n)?,
                scale: vector("scale", n)?,
            }
        }
        other => return Err(ApiError::Artifact(format!("unknown params kind `{other}`"))),
    };
    Ok(LearnerState {
        method,
        params,
        provenance,
    })
}

pub fn save_learner(learner: &LearnerState, path: impl AsRef<Path>) -> Result<(), ApiError> {
    let path = path.as_ref();
    fs::write(path, render_learner(learner)).map_err(|source| ApiError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_learner(path: impl AsRef<Path>) -> Result<LearnerState, ApiError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ApiError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_learner(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::fomaml::OuterConfig;
    use crate::sampler::{episode_stream, sample_episode};

    fn table(seed: u64) -> DatasetTable {
        generate_synthetic(&SyntheticSpec {
            num_classes: 12,
            dim: 6,
            samples_per_class: 12,
            class_std: 0.5,
            mean_scale: 1.0,
            seed,
        })
        .unwrap()
    }

    fn small_fomaml() -> MethodConfig {
        MethodConfig::FoMaml(FoMamlConfig {
            hidden: 8,
            outer: OuterConfig {
                lr: 0.05,
                meta_batch: 4,
                epochs: 5,
            },
            ..Default::default()
        })
    }

    fn spec_for(method: MethodConfig) -> MetaLearnerSpec {
        let mut spec = MetaLearnerSpec::new(method);
        spec.train_episode_spec = EpisodeSpec::new(5, 1, QueryCount::Fixed(5)).unwrap();
        spec
    }

    #[test]
    fn proto_meta_fit_is_stateless() {
        let spec = MetaLearnerSpec::new(MethodConfig::default_for("proto").unwrap());
        let l = meta_fit(&spec, &table(1), 3).unwrap();
        assert_eq!(l.params, LearnedParams::None);
        assert_eq!(l.provenance, Provenance { seed: 3, consumed: 0 });
    }

    #[test]
    fn incompatible_mode_rejected() {
        let mut spec = MetaLearnerSpec::new(MethodConfig::default_for("fomaml").unwrap());
        spec.data_mode = DataMode::Batch;
        assert!(matches!(meta_fit(&spec, &table(1), 0), Err(ApiError::Config(_))));
        let mut spec = MetaLearnerSpec::new(MethodConfig::default_for("linear").unwrap());
        spec.data_mode = DataMode::Episode;
        assert!(matches!(meta_fit(&spec, &table(1), 0), Err(ApiError::Config(_))));
        let mut spec = MetaLearnerSpec::new(MethodConfig::default_for("qda").unwrap());
        spec.data_mode = DataMode::Batch;
        assert!(meta_fit(&spec, &table(1), 0).is_ok());
    }

    #[test]
    fn fit_does_not_mutate_learner_and_one_shot_protos_are_support() {
        let spec = MetaLearnerSpec::new(MethodConfig::default_for("proto").unwrap());
        let l = meta_fit(&spec, &table(1), 3).unwrap();
        let before = l.clone();
        let ep = sample_episode(&table(2), &EpisodeSpec::five_way_one_shot(), &mut RngState::new(1)).unwrap();
        let p = fit(&l, &ep.support).unwrap();
        assert_eq!(l, before);
        match &p.adapted {
            Adapted::Proto(protos) => {
                for e in &ep.support {
                    assert_eq!(protos.centers[e.label], e.features);
                }
            }
            other => panic!("{other:?}"),
        }
        for e in &ep.support {
            assert_eq!(p.predict(std::slice::from_ref(&e.features)).unwrap(), vec![e.label]);
        }
        assert!(p.predict(&[]).unwrap().is_empty());
        assert!(matches!(p.predict(&[vec![0.0; 2]]), Err(ApiError::Shape { .. })));
    }

    #[test]
    fn bad_support_is_episode_format_error() {
        let spec = MetaLearnerSpec::new(MethodConfig::default_for("proto").unwrap());
        let l = meta_fit(&spec, &table(1), 3).unwrap();
        let support = vec![
            LabeledExample { features: vec![0.0; 6], label: 0 },
            LabeledExample { features: vec![1.0; 6], label: 0 },
            LabeledExample { features: vec![2.0; 6], label: 1 },
        ];
        assert!(matches!(fit(&l, &support), Err(ApiError::EpisodeFormat(_))));
    }

    #[test]
    fn fomaml_adaptation_moves_weights_unless_zero_steps() {
        let spec = spec_for(small_fomaml());
        let l = meta_fit(&spec, &table(1), 3).unwrap();
        let ep = sample_episode(&table(2), &EpisodeSpec::five_way_one_shot(), &mut RngState::new(1)).unwrap();
        let LearnedParams::Mlp(base) = &l.params else { panic!() };
        let p = fit(&l, &ep.support).unwrap();
        let Adapted::Mlp(adapted) = &p.adapted else { panic!() };
        assert_ne!(adapted, base);

        let mut zero = l.clone();
        if let MethodConfig::FoMaml(cfg) = &mut zero.method {
            cfg.inner.steps = 0;
        }
        let p = fit(&zero, &ep.support).unwrap();
        let Adapted::Mlp(adapted) = &p.adapted else { panic!() };
        assert_eq!(adapted, base);
    }

    #[test]
    fn qda_means_recomputed() {
        let spec = MetaLearnerSpec::new(MethodConfig::default_for("qda").unwrap());
        let l = meta_fit(&spec, &table(1), 0).unwrap();
        let ep = sample_episode(
            &table(2),
            &EpisodeSpec::new(5, 4, QueryCount::AllRemaining).unwrap(),
            &mut RngState::new(4),
        )
        .unwrap();
        let p = fit(&l, &ep.support).unwrap();
        let Adapted::Qda(model) = &p.adapted else { panic!() };
        for label in 0..5 {
            let members: Vec<&LabeledExample> = ep.support.iter().filter(|e| e.label == label).collect();
            for j in 0..6 {
                let m = members.iter().map(|e| e.features[j]).sum::<f64>() / 4.0;
                assert!((model.means[label][j] - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn artifact_round_trip_for_every_method() {
        for name in MethodConfig::NAMES {
            let mut method = MethodConfig::default_for(name).unwrap();
            if name == "fomaml" {
                method = small_fomaml();
            }
            if name == "sleeper" {
                method.set("seconds", "0").unwrap();
            }
            let spec = spec_for(method);
            let l = meta_fit(&spec, &table(1), 11).unwrap();
            let text = render_learner(&l);
            assert!(text.starts_with("MDLART1\nmethod="));
            assert_eq!(parse_learner(&text).unwrap(), l, "{name}");
        }
    }

    #[test]
    fn artifact_errors() {
        assert!(matches!(parse_learner("NOPE\n"), Err(ApiError::Artifact(_))));
        assert!(matches!(parse_learner("MDLART2\nmethod=proto\n"), Err(ApiError::ArtifactVersion { .. })));
        let spec = spec_for(small_fomaml());
        let text = render_learner(&meta_fit(&spec, &table(1), 1).unwrap());
        let truncated = &text[..text.len() / 2];
        assert!(matches!(parse_learner(truncated), Err(ApiError::Artifact(_))));
    }

    #[test]
    fn fomaml_meta_fit_is_deterministic() {
        let spec = spec_for(small_fomaml());
        let a = render_learner(&meta_fit(&spec, &table(1), 5).unwrap());
        let b = render_learner(&meta_fit(&spec, &table(1), 5).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn transductive_predict_caches_batched_result() {
        let spec = MetaLearnerSpec::new(MethodConfig::default_for("ptmap").unwrap());
        let l = meta_fit(&spec, &table(1), 0).unwrap();
        let ep = &episode_stream(&table(2), &EpisodeSpec::five_way_one_shot(), 1, 3).unwrap()[0];
        let p = fit(&l, &ep.support).unwrap();
        assert!(p.is_transductive());
        let q = ep.query_features();
        let labels = p.predict(&q).unwrap();
        for (x, y) in q.iter().zip(&labels) {
            assert_eq!(p.predict_one(x).unwrap(), *y);
        }
        assert_eq!(p.predict(&q).unwrap(), labels);
    }

    #[test]
    fn method_keys_validated() {
        let mut m = MethodConfig::default_for("ptmap").unwrap();
        m.set("beta", "0.7").unwrap();
        assert!(m.set("bogus", "1").is_err());
        assert!(m.set("beta", "abc").is_err());
        assert!(MethodConfig::default_for("maml2").is_err());
    }
}
