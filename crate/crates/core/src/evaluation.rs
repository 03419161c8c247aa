//! Episode accuracy, confidence intervals and the worst-of-three final score.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::api::{ApiError, Learner, Predictor};
use crate::dataset::{parse_f64, render_f64, DatasetTable};
use crate::sampler::{sample_stream_episode, EpisodeSpec, SamplerError};

pub const DEFAULT_EPISODE_COUNT: usize = 600;
pub const RUNS_PER_SUBMISSION: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Argument(String),
    #[error("at least two values are needed for a confidence interval, got {0}")]
    TooFewValues(usize),
    #[error("episode {index} failed: {source}")]
    Episode {
        index: usize,
        #[source]
        source: ApiError,
    },
    #[error("episode {index}: {message}")]
    Prediction { index: usize, message: String },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("final score needs exactly {RUNS_PER_SUBMISSION} runs with distinct seeds: {0}")]
    FinalScore(String),
    #[error("malformed score report line {line}: {message}")]
    Report { line: usize, message: String },
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn cat_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::Argument(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(EvalError::Argument("accuracy of an empty query set".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Normal-approximation 95% half-width, `1.96 · s / √n` with the `n − 1`
/// sample standard deviation.
pub fn ci95(values: &[f64]) -> Result<f64, EvalError> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::TooFewValues(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeScore {
    pub index: usize,
    pub accuracy: f64,
    pub query_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateScore {
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub episode_count: usize,
    pub seed: u64,
}

impl AggregateScore {
    pub fn from_episodes(episodes: &[EpisodeScore], seed: u64) -> Result<Self, EvalError> {
        let acc: Vec<f64> = episodes.iter().map(|e| e.accuracy).collect();
        Ok(Self {
            mean: acc.iter().sum::<f64>() / acc.len().max(1) as f64,
            ci95_halfwidth: ci95(&acc)?,
            episode_count: acc.len(),
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Failed,
    TimedOut,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Completed => "completed",
            RunStatus::Failed => "failed",
            RunStatus::TimedOut => "timed_out",
        })
    }
}

impl FromStr for RunStatus {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "completed" => Ok(RunStatus::Completed),
            "failed" => Ok(RunStatus::Failed),
            "timed_out" => Ok(RunStatus::TimedOut),
            other => Err(EvalError::Argument(format!("unknown status `{other}`"))),
        }
    }
}

/// One submission's outcome. `final_score` is present only when every run
/// completed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: String,
    pub scores: Vec<AggregateScore>,
    pub final_score: Option<f64>,
    pub wallclock_seconds: f64,
    pub status: RunStatus,
}

/// The minimum of the per-seed means over exactly three runs with distinct
/// seeds.
pub fn final_score(scores: &[AggregateScore]) -> Result<f64, EvalError> {
    if scores.len() != RUNS_PER_SUBMISSION {
        return Err(EvalError::FinalScore(format!("got {} runs", scores.len())));
    }
    let seeds: BTreeSet<u64> = scores.iter().map(|s| s.seed).collect();
    if seeds.len() != scores.len() {
        return Err(EvalError::FinalScore("seeds repeat".into()));
    }
    Ok(scores.iter().map(|s| s.mean).fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub episode_count: usize,
    pub seed: u64,
    pub deadline: Option<Instant>,
    /// Worker threads for episode evaluation; 0 uses the global pool.
    pub workers: usize,
    /// Incremented once per scored episode.
    pub progress: Option<Arc<AtomicUsize>>,
}

impl EvalOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            episode_count: DEFAULT_EPISODE_COUNT,
            seed,
            deadline: None,
            workers: 0,
            progress: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalOutcome {
    Completed {
        aggregate: AggregateScore,
        episodes: Vec<EpisodeScore>,
    },
    TimedOut {
        completed: usize,
    },
}

fn score_episode<L: Learner>(
    learner: &L,
    pool: &DatasetTable,
    spec: &EpisodeSpec,
    seed: u64,
    index: usize,
) -> Result<EpisodeScore, EvalError> {
    let episode = sample_stream_episode(pool, spec, seed, index)?;
    let predictor = learner
        .fit(&episode.support)
        .map_err(|source| EvalError::Episode { index, source })?;
    let predicted = predictor
        .predict(&episode.query_features())
        .map_err(|source| EvalError::Episode { index, source })?;
    let truth = episode.query_labels();
    if predicted.len() != truth.len() {
        return Err(EvalError::Prediction {
            index,
            message: format!("{} predictions for {} queries", predicted.len(), truth.len()),
        });
    }
    if let Some(bad) = predicted.iter().find(|&&p| p >= spec.n_way) {
        return Err(EvalError::Prediction {
            index,
            message: format!("label {bad} outside 0..{}", spec.n_way),
        });
    }
    Ok(EpisodeScore {
        index,
        accuracy: cat_accuracy(&predicted, &truth)?,
        query_count: truth.len(),
    })
}

/// Scores `learner` on `episode_count` episodes of the stream for
/// `options.seed`. The first failing episode (lowest index) aborts the run;
/// passing the deadline yields `TimedOut` with the number of episodes that
/// finished in time.
pub fn evaluate_learner<L: Learner>(
    learner: &L,
    pool: &DatasetTable,
    spec: &EpisodeSpec,
    options: &EvalOptions,
) -> Result<EvalOutcome, EvalError> {
    spec.validate()?;
    if options.episode_count < 2 {
        return Err(EvalError::Argument("episode count must be at least 2".into()));
    }
    let expired = || options.deadline.is_some_and(|d| Instant::now() >= d);
    let run = || {
        (0..options.episode_count)
            .into_par_iter()
            .map(|i| {
                if expired() {
                    Ok(None)
                } else {
                    let score = score_episode(learner, pool, spec, options.seed, i)?;
                    if let Some(p) = &options.progress {
                        p.fetch_add(1, Ordering::Relaxed);
                    }
                    Ok(Some(score))
                }
            })
            .collect::<Vec<Result<Option<EpisodeScore>, EvalError>>>()
    };
    let results = if options.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| EvalError::Argument(e.to_string()))?
            .install(run)
    } else {
        run()
    };

    let mut episodes = Vec::with_capacity(results.len());
    let mut timed_out = false;
    for r in results {
        match r? {
            Some(score) => episodes.push(score),
            None => timed_out = true,
        }
    }
    if timed_out || expired() {
        return Ok(EvalOutcome::TimedOut {
            completed: episodes.len(),
        });
    }
    let aggregate = AggregateScore::from_episodes(&episodes, options.seed)?;
    Ok(EvalOutcome::Completed { aggregate, episodes })
}

/// `episode,<i>,<acc>` lines followed by one
/// `aggregate,<mean>,<ci95>,<count>,<seed>` line.
pub fn render_score_report(episodes: &[EpisodeScore], aggregate: &AggregateScore) -> String {
    let mut out = String::new();
    for e in episodes {
        out.push_str(&format!("episode,{},{}\n", e.index, render_f64(e.accuracy)));
    }
    out.push_str(&format!(
        "aggregate,{},{},{},{}\n",
        render_f64(aggregate.mean),
        render_f64(aggregate.ci95_halfwidth),
        aggregate.episode_count,
        aggregate.seed
    ));
    out
}

/// Parses a score report into `(index, accuracy)` pairs and the aggregate.
pub fn parse_score_report(text: &str) -> Result<(Vec<(usize, f64)>, AggregateScore), EvalError> {
    let mut episodes = Vec::new();
    let mut aggregate = None;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let bad = |message: &str| EvalError::Report {
            line: line_no,
            message: message.to_string(),
        };
        let fields: Vec<&str> = line.trim().split(',').collect();
        match fields.as_slice() {
            [""] => {}
            ["episode", i, acc] => episodes.push((
                i.parse().map_err(|_| bad("bad episode index"))?,
                parse_f64(acc).ok_or_else(|| bad("bad accuracy"))?,
            )),
            ["aggregate", mean, ci, count, seed] => {
                aggregate = Some(AggregateScore {
                    mean: parse_f64(mean).ok_or_else(|| bad("bad mean"))?,
                    ci95_halfwidth: parse_f64(ci).ok_or_else(|| bad("bad half-width"))?,
                    episode_count: count.parse().map_err(|_| bad("bad count"))?,
                    seed: seed.parse().map_err(|_| bad("bad seed"))?,
                })
            }
            _ => return Err(bad("unrecognized record")),
        }
    }
    let aggregate = aggregate.ok_or(EvalError::Report {
        line: text.lines().count(),
        message: "missing aggregate line".into(),
    })?;
    Ok((episodes, aggregate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, FeatureVector, SyntheticSpec};
    use crate::sampler::{LabeledExample, QueryCount};
    use std::time::Duration;

    fn pool() -> DatasetTable {
        generate_synthetic(&SyntheticSpec {
            num_classes: 10,
            dim: 3,
            samples_per_class: 10,
            class_std: 1.0,
            mean_scale: 1.0,
            seed: 4,
        })
        .unwrap()
    }

    /// Predicts a fixed label for every query.
    struct Constant(usize);

    impl Learner for Constant {
        type Predictor = usize;
        fn fit(&self, _support: &[LabeledExample]) -> Result<usize, ApiError> {
            Ok(self.0)
        }
    }

    impl Predictor for usize {
        fn predict(&self, query: &[FeatureVector]) -> Result<Vec<usize>, ApiError> {
            Ok(vec![*self; query.len()])
        }
    }

    /// Fails on support sets whose first vector has a positive first coordinate.
    struct Picky;

    impl Learner for Picky {
        type Predictor = usize;
        fn fit(&self, support: &[LabeledExample]) -> Result<usize, ApiError> {
            if support[0].features[0] > 0.0 {
                Err(ApiError::Config("refused".into()))
            } else {
                Ok(0)
            }
        }
    }

    struct Slow;

    impl Learner for Slow {
        type Predictor = usize;
        fn fit(&self, _support: &[LabeledExample]) -> Result<usize, ApiError> {
            std::thread::sleep(Duration::from_millis(20));
            Ok(0)
        }
    }

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(cat_accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap(), 0.75);
        assert!(cat_accuracy(&[0], &[0, 1]).is_err());
        assert!(cat_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn ci95_matches_hand_computation() {
        // mean 2.5, sample variance 5/3.
        let h = ci95(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((h - 1.96 * (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(ci95(&[0.5; 10]).unwrap(), 0.0);
        assert!(matches!(ci95(&[1.0]), Err(EvalError::TooFewValues(1))));
    }

    #[test]
    fn accuracy_matches_counting_oracle() {
        let mut rng = crate::rng::RngState::new(8);
        let p: Vec<usize> = (0..10_000).map(|_| rng.below(5)).collect();
        let t: Vec<usize> = (0..10_000).map(|_| rng.below(5)).collect();
        let mut hits = 0u32;
        for i in 0..p.len() {
            hits += u32::from((p[i] ^ t[i]) == 0);
        }
        assert_eq!(cat_accuracy(&p, &t).unwrap(), f64::from(hits) / 10_000.0);
        let mut truth = vec![0usize; 95];
        truth[..19].fill(3);
        assert_eq!(cat_accuracy(&[3; 95], &truth).unwrap(), 0.2);
    }

    #[test]
    fn ci95_of_balanced_zero_one() {
        let values: Vec<f64> = (0..600).map(|i| (i % 2) as f64).collect();
        let s = (0.25f64 * 600.0 / 599.0).sqrt();
        let h = ci95(&values).unwrap();
        assert!((h - 1.96 * s / 600f64.sqrt()).abs() < 1e-15);
        assert!((h - 0.0400).abs() < 5e-5);
    }

    #[test]
    fn ci95_scales_with_root_n() {
        let mut rng = crate::rng::RngState::new(12);
        let small: Vec<f64> = (0..20_000).map(|_| rng.unit_f64()).collect();
        let large: Vec<f64> = (0..80_000).map(|_| rng.unit_f64()).collect();
        let ratio = ci95(&small).unwrap() / ci95(&large).unwrap();
        assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn final_score_is_worst_of_three() {
        let s = |mean, seed| AggregateScore {
            mean,
            ci95_halfwidth: 0.0,
            episode_count: 600,
            seed,
        };
        assert_eq!(final_score(&[s(0.61, 1), s(0.58, 2), s(0.64, 3)]).unwrap(), 0.58);
        assert!(final_score(&[s(0.6, 1), s(0.6, 2)]).is_err());
        assert!(final_score(&[s(0.6, 1), s(0.6, 1), s(0.7, 2)]).is_err());
    }

    #[test]
    fn constant_learner_scores_one_over_n() {
        let spec = EpisodeSpec::new(5, 1, QueryCount::Fixed(3)).unwrap();
        let out = evaluate_learner(&Constant(2), &pool(), &spec, &EvalOptions::new(9)).unwrap();
        let EvalOutcome::Completed { aggregate, episodes } = out else { panic!() };
        assert_eq!(episodes.len(), 600);
        assert!(episodes.iter().all(|e| (e.accuracy - 0.2).abs() < 1e-15));
        assert!((aggregate.mean - 0.2).abs() < 1e-12);
        assert!(aggregate.ci95_halfwidth < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let spec = EpisodeSpec::new(5, 1, QueryCount::Fixed(3)).unwrap();
        let err = evaluate_learner(&Constant(5), &pool(), &spec, &EvalOptions::new(1)).unwrap_err();
        assert!(matches!(err, EvalError::Prediction { index: 0, .. }));
    }

    #[test]
    fn first_failing_episode_is_reported() {
        let spec = EpisodeSpec::new(5, 1, QueryCount::Fixed(3)).unwrap();
        let p = pool();
        let expected = (0..600)
            .find(|&i| sample_stream_episode(&p, &spec, 3, i).unwrap().support[0].features[0] > 0.0)
            .unwrap();
        match evaluate_learner(&Picky, &p, &spec, &EvalOptions::new(3)) {
            Err(EvalError::Episode { index, .. }) => assert_eq!(index, expected),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deadline_yields_timed_out() {
        let spec = EpisodeSpec::new(5, 1, QueryCount::Fixed(3)).unwrap();
        let options = EvalOptions {
            deadline: Some(Instant::now() + Duration::from_millis(100)),
            workers: 1,
            ..EvalOptions::new(1)
        };
        match evaluate_learner(&Slow, &pool(), &spec, &options).unwrap() {
            EvalOutcome::TimedOut { completed } => assert!(completed < 600),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_round_trips() {
        let episodes = vec![
            EpisodeScore { index: 0, accuracy: 0.4, query_count: 5 },
            EpisodeScore { index: 1, accuracy: 0.8, query_count: 5 },
        ];
        let agg = AggregateScore::from_episodes(&episodes, 77).unwrap();
        let text = render_score_report(&episodes, &agg);
        assert!(text.starts_with("episode,0,0.4\nepisode,1,0.8\naggregate,"));
        assert!(text.ends_with(",2,77\n"));
        assert_eq!(parse_score_report(&text).unwrap(), (vec![(0, 0.4), (1, 0.8)], agg));
        assert!(matches!(parse_score_report("episode,x,1\n"), Err(EvalError::Report { line: 1, .. })));
    }
}
