//! Ingestion (meta-training) and scoring (meta-test) under a wallclock
//! budget, three-seed phase runs, and the leaderboard file.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::api::{self, parse_value, ApiError, DataMode, LearnerState, MetaLearnerSpec, MethodConfig};
use crate::dataset::{
    generate_synthetic, load_feature_dataset, parse_f64, render_f64, split_classes, DatasetError,
    MetaSplit, SyntheticSpec,
};
use crate::evaluation::{
    self, evaluate_learner, render_score_report, AggregateScore, EpisodeScore, EvalError, EvalOptions,
    EvalOutcome, RunResult, RunStatus, DEFAULT_EPISODE_COUNT, RUNS_PER_SUBMISSION,
};
use crate::sampler::{EpisodeSpec, QueryCount};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("leaderboard line {line}: {message}")]
    Leaderboard { line: usize, message: String },
}

fn config_error(message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        line: None,
        message: message.into(),
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, PipelineError> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| PipelineError::Config {
            line: Some(n + 1),
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(PipelineError::Config {
                line: Some(n + 1),
                message: "empty key".into(),
            });
        }
        pairs.push((key.to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub meta_train_classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Pre-split meta-train and meta-test tables.
    Files { meta_train: PathBuf, meta_test: PathBuf },
    /// One table split by class.
    Pool { path: PathBuf, split: SplitSpec },
    Synthetic { spec: SyntheticSpec, split: SplitSpec },
}

impl DataSource {
    pub fn load(&self) -> Result<MetaSplit, PipelineError> {
        Ok(match self {
            DataSource::Files { meta_train, meta_test } => MetaSplit {
                meta_train: load_feature_dataset(meta_train)?,
                meta_test: load_feature_dataset(meta_test)?,
            },
            DataSource::Pool { path, split } => {
                split_classes(&load_feature_dataset(path)?, split.meta_train_classes, split.seed)?
            }
            DataSource::Synthetic { spec, split } => {
                split_classes(&generate_synthetic(spec)?, split.meta_train_classes, split.seed)?
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseName {
    Public,
    Feedback,
    Final,
    Custom,
}

impl PhaseName {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseName::Public => "public",
            PhaseName::Feedback => "feedback",
            PhaseName::Final => "final",
            PhaseName::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        match s {
            "public" => Ok(PhaseName::Public),
            "feedback" => Ok(PhaseName::Feedback),
            "final" => Ok(PhaseName::Final),
            "custom" => Ok(PhaseName::Custom),
            other => Err(config_error(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub name: PhaseName,
    pub data: DataSource,
    pub eval_spec: EpisodeSpec,
    pub episode_count: usize,
    pub budget_seconds: f64,
    pub seeds: Vec<u64>,
    pub method: String,
    /// Hyperparameter overrides by method namespace; only those for the
    /// selected method are applied.
    pub method_overrides: BTreeMap<String, Vec<(String, String)>>,
    pub data_mode: Option<DataMode>,
    pub train_spec: EpisodeSpec,
    /// Leaderboard name; defaults to the method name.
    pub label: Option<String>,
    pub output_dir: PathBuf,
    pub leaderboard: Option<PathBuf>,
    /// Per-epoch training log; `{seed}` is replaced by the run seed.
    pub train_log: Option<String>,
    pub workers: usize,
}

fn synthetic(num_classes: usize, samples_per_class: usize, meta_train_classes: usize) -> DataSource {
    DataSource::Synthetic {
        spec: SyntheticSpec {
            num_classes,
            dim: 32,
            samples_per_class,
            class_std: 1.0,
            mean_scale: 1.0,
            seed: 0,
        },
        split: SplitSpec {
            meta_train_classes,
            seed: 0,
        },
    }
}

impl PhaseConfig {
    pub fn preset(name: PhaseName) -> Self {
        let data = match name {
            PhaseName::Public => synthetic(1623, 20, 964),
            PhaseName::Feedback => synthetic(100, 600, 80),
            PhaseName::Final => synthetic(100, 600, 85),
            PhaseName::Custom => DataSource::Synthetic {
                spec: SyntheticSpec {
                    num_classes: 100,
                    dim: 16,
                    samples_per_class: 20,
                    class_std: 0.5,
                    mean_scale: 1.0,
                    seed: 2021,
                },
                split: SplitSpec {
                    meta_train_classes: 80,
                    seed: 1,
                },
            },
        };
        Self {
            name,
            data,
            eval_spec: EpisodeSpec::new(5, 1, QueryCount::AllRemaining).expect("valid spec"),
            episode_count: DEFAULT_EPISODE_COUNT,
            budget_seconds: 7200.0,
            seeds: vec![1, 2, 3],
            method: "proto".into(),
            method_overrides: BTreeMap::new(),
            data_mode: None,
            train_spec: EpisodeSpec::new(5, 1, QueryCount::Fixed(15)).expect("valid spec"),
            label: None,
            output_dir: PathBuf::from("out"),
            leaderboard: None,
            train_log: None,
            workers: 0,
        }
    }

    /// Builds a config from `key = value` pairs. `phase.name` selects the
    /// preset the other keys override, wherever it appears.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, PipelineError> {
        let name = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "phase.name")
            .map(|(_, v)| PhaseName::parse(v))
            .transpose()?
            .unwrap_or(PhaseName::Custom);
        let mut cfg = Self::preset(name);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        Self::from_pairs(&parse_config_text(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(io_error(path))?)
    }

    fn synthetic_mut(&mut self) -> (&mut SyntheticSpec, &mut SplitSpec) {
        if !matches!(self.data, DataSource::Synthetic { .. }) {
            let DataSource::Synthetic { spec, split } = Self::preset(PhaseName::Custom).data else {
                unreachable!()
            };
            self.data = DataSource::Synthetic { spec, split };
        }
        match &mut self.data {
            DataSource::Synthetic { spec, split } => (spec, split),
            _ => unreachable!(),
        }
    }

    fn split_mut(&mut self) -> Result<&mut SplitSpec, PipelineError> {
        match &mut self.data {
            DataSource::Synthetic { split, .. } | DataSource::Pool { split, .. } => Ok(split),
            DataSource::Files { .. } => Err(config_error("data.split.* needs a pool or synthetic source")),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let num = |v: &str| -> Result<usize, PipelineError> { Ok(parse_value(key, v)?) };
        let real = |v: &str| parse_f64(v).ok_or_else(|| config_error(format!("invalid value `{v}` for `{key}`")));
        let int = |v: &str| -> Result<u64, PipelineError> { Ok(parse_value(key, v)?) };
        match key {
            "phase.name" => self.name = PhaseName::parse(value)?,
            "phase.budget_seconds" => self.budget_seconds = real(value)?,
            "phase.episode_count" => self.episode_count = num(value)?,
            "phase.seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| int(s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "phase.label" => self.label = Some(value.to_string()),
            "data.meta_train" | "data.meta_test" => {
                let path = PathBuf::from(value);
                let (mut train, mut test) = match &self.data {
                    DataSource::Files { meta_train, meta_test } => (meta_train.clone(), meta_test.clone()),
                    _ => (PathBuf::new(), PathBuf::new()),
                };
                if key == "data.meta_train" {
                    train = path;
                } else {
                    test = path;
                }
                self.data = DataSource::Files {
                    meta_train: train,
                    meta_test: test,
                };
            }
            "data.pool" => {
                let split = match &self.data {
                    DataSource::Synthetic { split, .. } | DataSource::Pool { split, .. } => *split,
                    DataSource::Files { .. } => SplitSpec {
                        meta_train_classes: 0,
                        seed: 0,
                    },
                };
                self.data = DataSource::Pool {
                    path: PathBuf::from(value),
                    split,
                };
            }
            "data.split.meta_train_classes" => self.split_mut()?.meta_train_classes = num(value)?,
            "data.split.seed" => self.split_mut()?.seed = int(value)?,
            "data.synthetic.num_classes" => self.synthetic_mut().0.num_classes = num(value)?,
            "data.synthetic.dim" => self.synthetic_mut().0.dim = num(value)?,
            "data.synthetic.samples_per_class" => self.synthetic_mut().0.samples_per_class = num(value)?,
            "data.synthetic.class_std" => self.synthetic_mut().0.class_std = real(value)?,
            "data.synthetic.mean_scale" => self.synthetic_mut().0.mean_scale = real(value)?,
            "data.synthetic.seed" => self.synthetic_mut().0.seed = int(value)?,
            "sampler.n_way" => self.eval_spec.n_way = num(value)?,
            "sampler.k_shot" => self.eval_spec.k_shot = num(value)?,
            "sampler.query_per_class" => {
                self.eval_spec.query_per_class = value.parse().map_err(|_| config_error(format!("invalid value `{value}` for `{key}`")))?
            }
            "train.data_mode" => self.data_mode = Some(value.parse()?),
            "train.n_way" => self.train_spec.n_way = num(value)?,
            "train.k_shot" => self.train_spec.k_shot = num(value)?,
            "train.query_per_class" => {
                self.train_spec.query_per_class = value.parse().map_err(|_| config_error(format!("invalid value `{value}` for `{key}`")))?
            }
            "method.name" => {
                MethodConfig::default_for(value)?;
                self.method = value.to_string();
            }
            "output.dir" => self.output_dir = PathBuf::from(value),
            "output.leaderboard" => self.leaderboard = Some(PathBuf::from(value)),
            "output.train_log" => self.train_log = Some(value.to_string()),
            "eval.workers" => self.workers = num(value)?,
            _ => {
                let Some((ns, sub)) = key.strip_prefix("method.").and_then(|rest| rest.split_once('.')) else {
                    return Err(config_error(format!("unknown key `{key}`")));
                };
                // Validate against the namespace's defaults right away.
                MethodConfig::default_for(ns)?.set(sub, value)?;
                self.method_overrides
                    .entry(ns.to_string())
                    .or_default()
                    .push((sub.to_string(), value.to_string()));
            }
        }
        Ok(())
    }

    pub fn method_config(&self) -> Result<MethodConfig, PipelineError> {
        let mut m = MethodConfig::default_for(&self.method)?;
        for (k, v) in self.method_overrides.get(&self.method).into_iter().flatten() {
            m.set(k, v)?;
        }
        Ok(m)
    }

    pub fn learner_spec(&self) -> Result<MetaLearnerSpec, PipelineError> {
        let mut spec = MetaLearnerSpec::new(self.method_config()?);
        if let Some(mode) = self.data_mode {
            spec.data_mode = mode;
        }
        spec.train_episode_spec = self.train_spec;
        spec.budget_hint = Some(Duration::from_secs_f64(self.budget_seconds.max(0.0)));
        spec.validate()?;
        Ok(spec)
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.clone())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.budget_seconds > 0.0) || !self.budget_seconds.is_finite() {
            return Err(config_error("phase.budget_seconds must be positive"));
        }
        if self.episode_count < 2 {
            return Err(config_error("phase.episode_count must be at least 2"));
        }
        if self.seeds.is_empty() {
            return Err(config_error("phase.seeds is empty"));
        }
        if let DataSource::Files { meta_train, meta_test } = &self.data {
            if meta_train.as_os_str().is_empty() || meta_test.as_os_str().is_empty() {
                return Err(config_error("both data.meta_train and data.meta_test are required"));
            }
        }
        if self.label().contains([',', ';', '\n']) {
            return Err(config_error("phase.label may not contain `,` or `;`"));
        }
        self.eval_spec
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        self.learner_spec()?;
        Ok(())
    }

    /// All settings as `key = value` lines.
    pub fn render(&self) -> String {
        let mut lines = vec![
            format!("phase.name = {}", self.name.as_str()),
            format!("phase.budget_seconds = {}", render_f64(self.budget_seconds)),
            format!("phase.episode_count = {}", self.episode_count),
            format!(
                "phase.seeds = {}",
                self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
            ),
        ];
        match &self.data {
            DataSource::Files { meta_train, meta_test } => {
                lines.push(format!("data.meta_train = {}", meta_train.display()));
                lines.push(format!("data.meta_test = {}", meta_test.display()));
            }
            DataSource::Pool { path, split } => {
                lines.push(format!("data.pool = {}", path.display()));
                lines.push(format!("data.split.meta_train_classes = {}", split.meta_train_classes));
                lines.push(format!("data.split.seed = {}", split.seed));
            }
            DataSource::Synthetic { spec, split } => {
                lines.push(format!("data.synthetic.num_classes = {}", spec.num_classes));
                lines.push(format!("data.synthetic.dim = {}", spec.dim));
                lines.push(format!("data.synthetic.samples_per_class = {}", spec.samples_per_class));
                lines.push(format!("data.synthetic.class_std = {}", render_f64(spec.class_std)));
                lines.push(format!("data.synthetic.mean_scale = {}", render_f64(spec.mean_scale)));
                lines.push(format!("data.synthetic.seed = {}", spec.seed));
                lines.push(format!("data.split.meta_train_classes = {}", split.meta_train_classes));
                lines.push(format!("data.split.seed = {}", split.seed));
            }
        }
        lines.push(format!("sampler.n_way = {}", self.eval_spec.n_way));
        lines.push(format!("sampler.k_shot = {}", self.eval_spec.k_shot));
        lines.push(format!("sampler.query_per_class = {}", self.eval_spec.query_per_class));
        lines.push(format!("method.name = {}", self.method));
        if let Ok(m) = self.method_config() {
            for (k, v) in m.pairs() {
                lines.push(format!("method.{}.{k} = {v}", self.method));
            }
        }
        if let Some(mode) = self.data_mode {
            lines.push(format!("train.data_mode = {mode}"));
        }
        lines.push(format!("train.n_way = {}", self.train_spec.n_way));
        lines.push(format!("train.k_shot = {}", self.train_spec.k_shot));
        lines.push(format!("train.query_per_class = {}", self.train_spec.query_per_class));
        lines.push(format!("output.dir = {}", self.output_dir.display()));
        if let Some(p) = &self.leaderboard {
            lines.push(format!("output.leaderboard = {}", p.display()));
        }
        if let Some(p) = &self.train_log {
            lines.push(format!("output.train_log = {p}"));
        }
        lines.push(format!("eval.workers = {}", self.workers));
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn artifact_path(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("learner-seed{seed}.mdl"))
    }

    pub fn report_path(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("score-seed{seed}.txt"))
    }
}

/// Wallclock budget on a monotonic clock.
#[derive(Debug, Clone, Copy)]
pub struct BudgetClock {
    start: Instant,
    limit: Duration,
}

impl BudgetClock {
    pub fn start(limit_seconds: f64) -> Self {
        Self::started_at(Instant::now(), limit_seconds)
    }

    pub fn started_at(start: Instant, limit_seconds: f64) -> Self {
        Self {
            start,
            limit: Duration::from_secs_f64(limit_seconds.max(0.0)),
        }
    }

    pub fn elapsed(&self) -> Duration {
        self.start.elapsed()
    }

    pub fn remaining(&self) -> Duration {
        self.limit.saturating_sub(self.elapsed())
    }

    pub fn expired(&self) -> bool {
        self.elapsed() >= self.limit
    }

    pub fn deadline(&self) -> Instant {
        self.start + self.limit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IngestOutcome {
    Completed { artifact: PathBuf, elapsed: Duration },
    TimedOut { elapsed: Duration },
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreOutcome {
    Completed {
        aggregate: AggregateScore,
        episodes: Vec<EpisodeScore>,
        report: PathBuf,
    },
    TimedOut { completed: usize },
    Failed { message: String },
}

fn open_log(template: &str, seed: u64) -> Result<BufWriter<File>, PipelineError> {
    let path = PathBuf::from(template.replace("{seed}", &seed.to_string()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    Ok(BufWriter::new(File::create(&path).map_err(io_error(&path))?))
}

fn ingest_worker(config: &PhaseConfig, seed: u64, cancel: &AtomicBool) -> Result<LearnerState, PipelineError> {
    let spec = config.learner_spec()?;
    let split = config.data.load()?;
    let mut log = config.train_log.as_deref().map(|t| open_log(t, seed)).transpose()?;
    let learner = api::meta_fit_with(
        &spec,
        &split.meta_train,
        seed,
        &|| cancel.load(Ordering::Relaxed),
        log.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let Some(mut w) = log {
        w.flush().map_err(|source| PipelineError::Io {
            path: config.train_log.clone().unwrap_or_default(),
            source,
        })?;
    }
    Ok(learner)
}

fn write_atomically(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents).map_err(io_error(&tmp))?;
    fs::rename(&tmp, path).map_err(io_error(path))
}

/// Meta-trains under `clock` and saves the learner to `artifact`. Loading
/// the meta-train data counts against the budget. On timeout no artifact is
/// left on disk.
pub fn run_ingestion(config: &PhaseConfig, seed: u64, clock: &BudgetClock, artifact: &Path) -> IngestOutcome {
    let _ = fs::remove_file(artifact);
    let cancel = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    {
        let config = config.clone();
        let cancel = Arc::clone(&cancel);
        thread::spawn(move || {
            let _ = tx.send(ingest_worker(&config, seed, &cancel));
        });
    }
    let result = match rx.recv_timeout(clock.remaining()) {
        Ok(r) => r,
        Err(_) => {
            cancel.store(true, Ordering::Relaxed);
            return IngestOutcome::TimedOut {
                elapsed: clock.elapsed(),
            };
        }
    };
    match result {
        Err(PipelineError::Api(ApiError::Cancelled)) => IngestOutcome::TimedOut {
            elapsed: clock.elapsed(),
        },
        Err(e) => IngestOutcome::Failed { message: e.to_string() },
        Ok(_) if clock.expired() => IngestOutcome::TimedOut {
            elapsed: clock.elapsed(),
        },
        Ok(learner) => match write_atomically(artifact, &api::render_learner(&learner)) {
            Ok(()) => IngestOutcome::Completed {
                artifact: artifact.to_path_buf(),
                elapsed: clock.elapsed(),
            },
            Err(e) => IngestOutcome::Failed { message: e.to_string() },
        },
    }
}

fn score_worker(
    config: &PhaseConfig,
    artifact: &Path,
    seed: u64,
    deadline: Instant,
    progress: Arc<AtomicUsize>,
) -> Result<EvalOutcome, PipelineError> {
    let learner = api::load_learner(artifact)?;
    let split = config.data.load()?;
    let options = EvalOptions {
        episode_count: config.episode_count,
        seed,
        deadline: Some(deadline),
        workers: config.workers,
        progress: Some(progress),
    };
    Ok(evaluate_learner(&learner, &split.meta_test, &config.eval_spec, &options)?)
}

/// Scores the artifact on the meta-test pool with the episode stream for
/// `seed`, within what is left of `clock`. The report is written only when
/// every episode completed.
pub fn run_scoring(
    config: &PhaseConfig,
    artifact: &Path,
    seed: u64,
    clock: &BudgetClock,
    report: &Path,
) -> ScoreOutcome {
    if !artifact.is_file() {
        return ScoreOutcome::Failed {
            message: format!("learner artifact missing: {}", artifact.display()),
        };
    }
    let _ = fs::remove_file(report);
    if clock.expired() {
        return ScoreOutcome::TimedOut { completed: 0 };
    }
    let progress = Arc::new(AtomicUsize::new(0));
    let (tx, rx) = mpsc::channel();
    {
        let config = config.clone();
        let artifact = artifact.to_path_buf();
        let progress = Arc::clone(&progress);
        let deadline = clock.deadline();
        thread::spawn(move || {
            let _ = tx.send(score_worker(&config, &artifact, seed, deadline, progress));
        });
    }
    let result = match rx.recv_timeout(clock.remaining()) {
        Ok(r) => r,
        Err(_) => {
            return ScoreOutcome::TimedOut {
                completed: progress.load(Ordering::Relaxed),
            }
        }
    };
    match result {
        Err(e) => ScoreOutcome::Failed { message: e.to_string() },
        Ok(EvalOutcome::TimedOut { completed }) => ScoreOutcome::TimedOut { completed },
        Ok(EvalOutcome::Completed { aggregate, episodes }) => {
            match write_atomically(report, &render_score_report(&episodes, &aggregate)) {
                Ok(()) => ScoreOutcome::Completed {
                    aggregate,
                    episodes,
                    report: report.to_path_buf(),
                },
                Err(e) => ScoreOutcome::Failed { message: e.to_string() },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardEntry {
    pub name: String,
    pub final_score: Option<f64>,
    pub means: Vec<f64>,
    pub ci95s: Vec<f64>,
    pub wallclock_seconds: f64,
    pub status: RunStatus,
}

fn join_reals(values: &[f64]) -> String {
    values.iter().map(|v| render_f64(*v)).collect::<Vec<_>>().join(";")
}

impl LeaderboardEntry {
    pub fn from_result(name: &str, result: &RunResult) -> Self {
        Self {
            name: name.to_string(),
            final_score: result.final_score,
            means: result.scores.iter().map(|s| s.mean).collect(),
            ci95s: result.scores.iter().map(|s| s.ci95_halfwidth).collect(),
            wallclock_seconds: result.wallclock_seconds,
            status: result.status,
        }
    }

    /// `name,final,m1;m2;m3,c1;c2;c3,wallclock,status`; a missing final is `-`.
    pub fn render(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{}",
            self.name,
            self.final_score.map(render_f64).unwrap_or_else(|| "-".into()),
            join_reals(&self.means),
            join_reals(&self.ci95s),
            self.wallclock_seconds,
            self.status
        )
    }

    /// The rendered entry with the wallclock field blanked.
    pub fn render_without_wallclock(&self) -> String {
        let mut fields: Vec<String> = self.render().split(',').map(str::to_string).collect();
        fields[4].clear();
        fields.join(",")
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split(',').collect();
        let [name, fin, means, cis, wall, status] = fields.as_slice() else {
            return Err(format!("expected 6 fields, found {}", fields.len()));
        };
        let reals = |s: &str, what: &str| -> Result<Vec<f64>, String> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(';')
                .map(|t| parse_f64(t).ok_or_else(|| format!("bad {what} `{t}`")))
                .collect()
        };
        let entry = Self {
            name: name.to_string(),
            final_score: match *fin {
                "-" => None,
                f => Some(parse_f64(f).ok_or_else(|| format!("bad final score `{f}`"))?),
            },
            means: reals(means, "mean")?,
            ci95s: reals(cis, "ci95")?,
            wallclock_seconds: parse_f64(wall).ok_or_else(|| format!("bad wallclock `{wall}`"))?,
            status: status.parse().map_err(|e: EvalError| e.to_string())?,
        };
        if entry.means.len() != entry.ci95s.len() {
            return Err("mean and ci95 counts differ".into());
        }
        if entry.status == RunStatus::Completed
            && (entry.final_score.is_none() || entry.means.len() != RUNS_PER_SUBMISSION)
        {
            return Err("completed entry needs a final score and three seed results".into());
        }
        Ok(entry)
    }
}

/// Appends one line under an exclusive file lock.
pub fn append_leaderboard(path: &Path, entry: &LeaderboardEntry) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_error(path))?;
    file.lock().map_err(io_error(path))?;
    let written = writeln!(file, "{}", entry.render()).and_then(|_| file.flush());
    let _ = file.unlock();
    written.map_err(io_error(path))
}

pub fn parse_leaderboard(text: &str) -> Result<Vec<LeaderboardEntry>, PipelineError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            LeaderboardEntry::parse(l.trim()).map_err(|message| PipelineError::Leaderboard { line: n + 1, message })
        })
        .collect()
}

/// Completed entries ranked by final score (higher first, then lower
/// wallclock), followed by unranked timed-out and failed entries.
pub fn leaderboard_report(text: &str) -> Result<String, PipelineError> {
    let entries = parse_leaderboard(text)?;
    let (mut ranked, unranked): (Vec<_>, Vec<_>) =
        entries.into_iter().partition(|e| e.status == RunStatus::Completed);
    ranked.sort_by(|a, b| {
        let (fa, fb) = (a.final_score.unwrap_or(f64::NAN), b.final_score.unwrap_or(f64::NAN));
        fb.total_cmp(&fa)
            .then(a.wallclock_seconds.total_cmp(&b.wallclock_seconds))
    });
    let mut out = String::from("rank,name,final,means,ci95s,wallclock,status\n");
    for (i, e) in ranked.iter().enumerate() {
        let line = e.render();
        out.push_str(&format!("{},{}\n", i + 1, line));
    }
    for e in &unranked {
        out.push_str(&format!("-,{}\n", e.render()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRun {
    pub result: RunResult,
    pub entry: LeaderboardEntry,
    /// Completed seeds' score reports, in seed order.
    pub reports: Vec<PathBuf>,
    pub messages: Vec<String>,
}

/// Ingestion then scoring for each seed, every pair under its own budget.
/// The first seed that times out or fails ends the phase with that status.
/// The entry is appended to the configured leaderboard.
pub fn run_phase(config: &PhaseConfig) -> Result<PhaseRun, PipelineError> {
    config.validate()?;
    if config.seeds.len() != RUNS_PER_SUBMISSION {
        return Err(config_error(format!(
            "phase.seeds needs exactly {RUNS_PER_SUBMISSION} seeds, got {}",
            config.seeds.len()
        )));
    }
    let mut distinct = config.seeds.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != config.seeds.len() {
        return Err(config_error("phase.seeds must be distinct"));
    }
    fs::create_dir_all(&config.output_dir).map_err(io_error(&config.output_dir))?;

    let mut scores = Vec::new();
    let mut reports = Vec::new();
    let mut messages = Vec::new();
    let mut status = RunStatus::Completed;
    let mut wallclock = Duration::ZERO;
    for &seed in &config.seeds {
        let clock = BudgetClock::start(config.budget_seconds);
        let artifact = config.artifact_path(seed);
        let outcome = match run_ingestion(config, seed, &clock, &artifact) {
            IngestOutcome::Completed { .. } => {
                run_scoring(config, &artifact, seed, &clock, &config.report_path(seed))
            }
            IngestOutcome::TimedOut { .. } => ScoreOutcome::TimedOut { completed: 0 },
            IngestOutcome::Failed { message } => ScoreOutcome::Failed { message },
        };
        wallclock += clock.elapsed();
        match outcome {
            ScoreOutcome::Completed { aggregate, report, .. } => {
                scores.push(aggregate);
                reports.push(report);
            }
            ScoreOutcome::TimedOut { completed } => {
                messages.push(format!("seed {seed}: timed out after {completed} episodes"));
                status = RunStatus::TimedOut;
                break;
            }
            ScoreOutcome::Failed { message } => {
                messages.push(format!("seed {seed}: {message}"));
                status = RunStatus::Failed;
                break;
            }
        }
    }
    let final_score = if status == RunStatus::Completed {
        Some(evaluation::final_score(&scores)?)
    } else {
        None
    };
    let result = RunResult {
        method: config.method.clone(),
        scores,
        final_score,
        wallclock_seconds: wallclock.as_secs_f64(),
        status,
    };
    let entry = LeaderboardEntry::from_result(&config.label(), &result);
    if let Some(path) = &config.leaderboard {
        append_leaderboard(path, &entry)?;
    }
    Ok(PhaseRun {
        result,
        entry,
        reports,
        messages,
    })
}
