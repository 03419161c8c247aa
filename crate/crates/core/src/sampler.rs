//! N-way K-shot episode and batch generation over a class pool.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{parse_f64, render_f64, ClassId, DatasetTable, FeatureVector};
use crate::rng::RngState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("pool has {available} classes, episode needs {needed}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class_id} has {available} examples, episode needs {needed}")]
    InsufficientExamples {
        class_id: ClassId,
        needed: usize,
        available: usize,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// How many query examples each episode class contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryCount {
    AllRemaining,
    Fixed(usize),
}

impl fmt::Display for QueryCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryCount::AllRemaining => f.write_str("all"),
            QueryCount::Fixed(q) => write!(f, "{q}"),
        }
    }
}

impl FromStr for QueryCount {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "all" | "all-remaining" => Ok(QueryCount::AllRemaining),
            other => match other.parse::<usize>() {
                Ok(q) if q >= 1 => Ok(QueryCount::Fixed(q)),
                _ => Err(SamplerError::Argument(format!(
                    "query count must be `all` or a positive integer, got `{other}`"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: QueryCount,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, query_per_class: QueryCount) -> Result<Self, SamplerError> {
        let spec = Self {
            n_way,
            k_shot,
            query_per_class,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The meta-test protocol: 5-way 1-shot, every remaining example queried.
    pub fn five_way_one_shot() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            query_per_class: QueryCount::AllRemaining,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n_way < 2 {
            return Err(SamplerError::Argument("n_way must be at least 2".into()));
        }
        if self.k_shot < 1 {
            return Err(SamplerError::Argument("k_shot must be at least 1".into()));
        }
        if self.query_per_class == QueryCount::Fixed(0) {
            return Err(SamplerError::Argument("query count must be positive".into()));
        }
        Ok(())
    }

    fn examples_needed(&self) -> usize {
        match self.query_per_class {
            QueryCount::AllRemaining => self.k_shot + 1,
            QueryCount::Fixed(q) => self.k_shot + q,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: FeatureVector,
    pub label: usize,
}

/// One few-shot task. Labels are episode labels in `0..n_way`, assigned in
/// class draw order; `class_map[label]` is the original class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<LabeledExample>,
    pub query: Vec<LabeledExample>,
    pub class_map: Vec<ClassId>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }

    pub fn query_features(&self) -> Vec<FeatureVector> {
        self.query.iter().map(|e| e.features.clone()).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|e| e.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<(FeatureVector, ClassId)>,
}

/// Samples one episode: `n_way` classes uniformly without replacement, then
/// `k_shot` support and the query examples per class without replacement.
pub fn sample_episode(
    pool: &DatasetTable,
    spec: &EpisodeSpec,
    rng: &mut RngState,
) -> Result<Episode, SamplerError> {
    spec.validate()?;
    if pool.num_classes() < spec.n_way {
        return Err(SamplerError::InsufficientClasses {
            needed: spec.n_way,
            available: pool.num_classes(),
        });
    }
    let needed = spec.examples_needed();
    let drawn = rng.sample_indices(pool.num_classes(), spec.n_way);

    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::new();
    let mut class_map = Vec::with_capacity(spec.n_way);
    for (label, &class_idx) in drawn.iter().enumerate() {
        let class = &pool.classes()[class_idx];
        let available = class.examples.len();
        if available < needed {
            return Err(SamplerError::InsufficientExamples {
                class_id: class.class_id,
                needed,
                available,
            });
        }
        let take = match spec.query_per_class {
            QueryCount::AllRemaining => available,
            QueryCount::Fixed(q) => spec.k_shot + q,
        };
        let order = rng.sample_indices(available, take);
        for (pos, &row) in order.iter().enumerate() {
            let example = LabeledExample {
                features: class.examples[row].clone(),
                label,
            };
            if pos < spec.k_shot {
                support.push(example);
            } else {
                query.push(example);
            }
        }
        class_map.push(class.class_id);
    }
    Ok(Episode {
        support,
        query,
        class_map,
    })
}

/// Episode `i` of the stream comes from substream `i` of `seed`.
pub fn sample_stream_episode(
    pool: &DatasetTable,
    spec: &EpisodeSpec,
    seed: u64,
    index: usize,
) -> Result<Episode, SamplerError> {
    let mut rng = RngState::new(seed).fork(index as u64);
    sample_episode(pool, spec, &mut rng)
}

/// `count` reproducible episodes. Generated in parallel; the result does not
/// depend on scheduling because every episode owns its substream.
pub fn episode_stream(
    pool: &DatasetTable,
    spec: &EpisodeSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>, SamplerError> {
    if count == 0 {
        return Err(SamplerError::Argument("count must be positive".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| sample_stream_episode(pool, spec, seed, i))
        .collect()
}

/// Uniform draw over all (class, example) pairs, without replacement within
/// the call.
pub fn sample_batch(
    pool: &DatasetTable,
    batch_size: usize,
    rng: &mut RngState,
) -> Result<Batch, SamplerError> {
    let total = pool.num_examples();
    if batch_size == 0 || batch_size > total {
        return Err(SamplerError::Argument(format!(
            "batch_size must be in 1..={total}, got {batch_size}"
        )));
    }
    let mut flat = Vec::with_capacity(total);
    for class in pool.classes() {
        for example in &class.examples {
            flat.push((example, class.class_id));
        }
    }
    let examples = rng
        .sample_indices(total, batch_size)
        .into_iter()
        .map(|i| (flat[i].0.clone(), flat[i].1))
        .collect();
    Ok(Batch { examples })
}

/// `per_class` examples from every class of the pool, shuffled together.
pub fn sample_balanced_batch(
    pool: &DatasetTable,
    per_class: usize,
    rng: &mut RngState,
) -> Result<Batch, SamplerError> {
    if per_class == 0 {
        return Err(SamplerError::Argument("per_class must be positive".into()));
    }
    let mut examples = Vec::with_capacity(per_class * pool.num_classes());
    for class in pool.classes() {
        if class.examples.len() < per_class {
            return Err(SamplerError::InsufficientExamples {
                class_id: class.class_id,
                needed: per_class,
                available: class.examples.len(),
            });
        }
        for row in rng.sample_indices(class.examples.len(), per_class) {
            examples.push((class.examples[row].clone(), class.class_id));
        }
    }
    rng.shuffle(&mut examples);
    Ok(Batch { examples })
}

/// Renders an episode as feature-table rows prefixed by role and label:
/// `S|Q,<episode_label>,<class_id>,<v1>,...,<vd>`.
pub fn render_episode(episode: &Episode) -> String {
    let dim = episode
        .support
        .first()
        .map(|e| e.features.len())
        .unwrap_or_default();
    let mut out = format!("dim={dim}\n");
    render_rows(&mut out, episode);
    out
}

fn render_rows(out: &mut String, episode: &Episode) {
    for (role, set) in [("S", &episode.support), ("Q", &episode.query)] {
        for ex in set {
            let _ = write!(out, "{role},{},{}", ex.label, episode.class_map[ex.label]);
            for v in &ex.features {
                let _ = write!(out, ",{}", render_f64(*v));
            }
            out.push('\n');
        }
    }
}

/// Several episodes in one document, each introduced by `episode=<index>`.
pub fn render_episode_stream(episodes: &[Episode]) -> String {
    let dim = episodes
        .first()
        .and_then(|e| e.support.first())
        .map(|e| e.features.len())
        .unwrap_or_default();
    let mut out = format!("dim={dim}\n");
    for (i, episode) in episodes.iter().enumerate() {
        let _ = writeln!(out, "episode={i}");
        render_rows(&mut out, episode);
    }
    out
}

pub fn parse_episode(text: &str) -> Result<Episode, SamplerError> {
    let mut dim = None;
    let mut support = Vec::new();
    let mut query = Vec::new();
    let mut class_map: Vec<Option<ClassId>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |message: String| SamplerError::Parse {
            line: idx + 1,
            message,
        };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some(d) = dim else {
            let d: usize = line
                .strip_prefix("dim=")
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| err("expected `dim=<d>` header".into()))?;
            dim = Some(d);
            continue;
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 3 {
            return Err(err(format!("expected {} fields, found {}", d + 3, fields.len())));
        }
        let label: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| err(format!("invalid label `{}`", fields[1])))?;
        let class_id: ClassId = fields[2]
            .trim()
            .parse()
            .map_err(|_| err(format!("invalid class id `{}`", fields[2])))?;
        let features = fields[3..]
            .iter()
            .map(|t| parse_f64(t).ok_or_else(|| err(format!("invalid value `{t}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        if class_map.len() <= label {
            class_map.resize(label + 1, None);
        }
        match class_map[label] {
            Some(existing) if existing != class_id => {
                return Err(err(format!("label {label} maps to two class ids")));
            }
            _ => class_map[label] = Some(class_id),
        }
        let example = LabeledExample { features, label };
        match fields[0].trim() {
            "S" => support.push(example),
            "Q" => query.push(example),
            other => return Err(err(format!("unknown role `{other}`"))),
        }
    }
    let class_map = class_map
        .into_iter()
        .enumerate()
        .map(|(label, id)| {
            id.ok_or_else(|| SamplerError::Argument(format!("label {label} has no examples")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Episode {
        support,
        query,
        class_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassRecord;

    fn pool(classes: usize, per_class: usize) -> DatasetTable {
        let records = (0..classes)
            .map(|c| ClassRecord {
                class_id: 100 + c as ClassId,
                examples: (0..per_class)
                    .map(|i| vec![c as f64, i as f64])
                    .collect(),
            })
            .collect();
        DatasetTable::new(2, records).unwrap()
    }

    #[test]
    fn omniglot_shape_gives_5_and_95() {
        let p = pool(30, 20);
        let ep = sample_episode(&p, &EpisodeSpec::five_way_one_shot(), &mut RngState::new(1)).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 95);
    }

    #[test]
    fn forced_selection() {
        let p = pool(5, 2);
        let ep = sample_episode(&p, &EpisodeSpec::five_way_one_shot(), &mut RngState::new(3)).unwrap();
        let mut ids = ep.class_map.clone();
        ids.sort();
        assert_eq!(ids, p.class_ids());
        assert_eq!(ep.query.len(), 5);
    }

    #[test]
    fn deficits_are_named() {
        let p = pool(4, 20);
        assert_eq!(
            sample_episode(&p, &EpisodeSpec::five_way_one_shot(), &mut RngState::new(0)),
            Err(SamplerError::InsufficientClasses {
                needed: 5,
                available: 4
            })
        );
        let p = pool(5, 1);
        match sample_episode(&p, &EpisodeSpec::five_way_one_shot(), &mut RngState::new(0)) {
            Err(SamplerError::InsufficientExamples { needed: 2, available: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        let spec = EpisodeSpec::new(2, 3, QueryCount::Fixed(5)).unwrap();
        assert!(sample_episode(&pool(3, 7), &spec, &mut RngState::new(0)).is_err());
        assert!(sample_episode(&pool(3, 8), &spec, &mut RngState::new(0)).is_ok());
    }

    #[test]
    fn fixed_query_count() {
        let spec = EpisodeSpec::new(3, 2, QueryCount::Fixed(4)).unwrap();
        let ep = sample_episode(&pool(10, 20), &spec, &mut RngState::new(5)).unwrap();
        assert_eq!(ep.support.len(), 6);
        assert_eq!(ep.query.len(), 12);
    }

    #[test]
    fn spec_validation() {
        assert!(EpisodeSpec::new(1, 1, QueryCount::AllRemaining).is_err());
        assert!(EpisodeSpec::new(2, 0, QueryCount::AllRemaining).is_err());
        assert!(EpisodeSpec::new(2, 1, QueryCount::Fixed(0)).is_err());
        assert_eq!("all".parse::<QueryCount>().unwrap(), QueryCount::AllRemaining);
        assert_eq!("19".parse::<QueryCount>().unwrap(), QueryCount::Fixed(19));
        assert!("0".parse::<QueryCount>().is_err());
    }

    #[test]
    fn stream_properties() {
        let p = pool(12, 20);
        let spec = EpisodeSpec::five_way_one_shot();
        let a = episode_stream(&p, &spec, 600, 9).unwrap();
        assert_eq!(a.len(), 600);
        let b = episode_stream(&p, &spec, 600, 9).unwrap();
        assert_eq!(render_episode_stream(&a), render_episode_stream(&b));
        let c = episode_stream(&p, &spec, 600, 10).unwrap();
        assert_ne!(a, c);
        let single = episode_stream(&p, &spec, 1, 9).unwrap();
        let mut rng = RngState::new(9).fork(0);
        assert_eq!(single[0], sample_episode(&p, &spec, &mut rng).unwrap());
    }

    #[test]
    fn class_frequency_is_uniform() {
        let p = pool(10, 3);
        let spec = EpisodeSpec::five_way_one_shot();
        let mut counts = [0usize; 10];
        let trials = 100_000;
        let root = RngState::new(77);
        for t in 0..trials {
            let ep = sample_episode(&p, &spec, &mut root.fork(t)).unwrap();
            for id in ep.class_map {
                counts[(id - 100) as usize] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.5).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn exhaustive_batch_is_permutation() {
        let p = pool(4, 5);
        let batch = sample_batch(&p, 20, &mut RngState::new(2)).unwrap();
        let mut seen: Vec<(u64, u64)> = batch
            .examples
            .iter()
            .map(|(x, id)| (*id, x[1] as u64))
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 20);
        assert!(sample_batch(&p, 21, &mut RngState::new(2)).is_err());
    }

    #[test]
    fn balanced_batch_has_fifty_per_class() {
        let p = pool(80, 60);
        let batch = sample_balanced_batch(&p, 50, &mut RngState::new(4)).unwrap();
        assert_eq!(batch.examples.len(), 4000);
        let mut counts = std::collections::HashMap::new();
        for (_, id) in &batch.examples {
            *counts.entry(*id).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 80);
        assert!(counts.values().all(|&c| c == 50));
    }

    #[test]
    fn batch_frequency_proportional_to_class_size() {
        let records = vec![
            ClassRecord { class_id: 0, examples: vec![vec![0.0]; 10] },
            ClassRecord { class_id: 1, examples: vec![vec![1.0]; 30] },
            ClassRecord { class_id: 2, examples: vec![vec![2.0]; 60] },
        ];
        let p = DatasetTable::new(1, records).unwrap();
        let mut rng = RngState::new(8);
        let mut counts = [0usize; 3];
        let mut draws = 0;
        while draws < 1_000_000 {
            for (_, id) in sample_batch(&p, 7, &mut rng).unwrap().examples {
                counts[id as usize] += 1;
                draws += 1;
            }
        }
        for (c, expected) in counts.iter().zip([0.1, 0.3, 0.6]) {
            let f = *c as f64 / draws as f64;
            assert!((f - expected).abs() < 0.01, "{f} vs {expected}");
        }
    }

    #[test]
    fn episode_text_round_trip() {
        let p = pool(8, 6);
        let ep = sample_episode(&p, &EpisodeSpec::five_way_one_shot(), &mut RngState::new(6)).unwrap();
        let text = render_episode(&ep);
        assert_eq!(parse_episode(&text).unwrap(), ep);
    }
}
