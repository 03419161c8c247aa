//! Feature-embedding datasets: the class-grouped table format, class splits
//! into meta-train/meta-test pools, and seeded synthetic Gaussian tables.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::RngState;
use crate::sampler::{EpisodeSpec, QueryCount};

pub type FeatureVector = Vec<f64>;
pub type ClassId = u64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid table: {0}")]
    Invalid(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub class_id: ClassId,
    pub examples: Vec<FeatureVector>,
}

/// A pool of labeled feature vectors grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    dim: usize,
    classes: Vec<ClassRecord>,
}

impl DatasetTable {
    /// Builds a table and checks every invariant: positive dimension, unique
    /// class ids, non-empty classes, consistent lengths, finite entries.
    pub fn new(dim: usize, classes: Vec<ClassRecord>) -> Result<Self, DatasetError> {
        if dim == 0 {
            return Err(DatasetError::Invalid("dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(classes.len());
        for class in &classes {
            if !seen.insert(class.class_id) {
                return Err(DatasetError::Invalid(format!(
                    "duplicate class id {}",
                    class.class_id
                )));
            }
            if class.examples.is_empty() {
                return Err(DatasetError::Invalid(format!(
                    "class {} has no examples",
                    class.class_id
                )));
            }
            for (row, example) in class.examples.iter().enumerate() {
                if example.len() != dim {
                    return Err(DatasetError::Invalid(format!(
                        "class {} example {} has length {}, expected {}",
                        class.class_id,
                        row,
                        example.len(),
                        dim
                    )));
                }
                if example.iter().any(|v| !v.is_finite()) {
                    return Err(DatasetError::Invalid(format!(
                        "class {} example {} has a non-finite entry",
                        class.class_id, row
                    )));
                }
            }
        }
        Ok(Self { dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_examples(&self) -> usize {
        self.classes.iter().map(|c| c.examples.len()).sum()
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn class(&self, class_id: ClassId) -> Option<&ClassRecord> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

/// Meta-train and meta-test pools with disjoint class sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSplit {
    pub meta_train: DatasetTable,
    pub meta_test: DatasetTable,
}

/// Renders a float as the shortest decimal that parses back to the same bits.
pub(crate) fn render_f64(value: f64) -> String {
    format!("{value:?}")
}

pub(crate) fn parse_f64(token: &str) -> Option<f64> {
    let value: f64 = token.trim().parse().ok()?;
    value.is_finite().then_some(value)
}

/// Parses the textual feature-table format.
pub fn parse_feature_dataset(text: &str) -> Result<DatasetTable, DatasetError> {
    let mut dim: Option<usize> = None;
    let mut order: Vec<ClassId> = Vec::new();
    let mut rows: HashMap<ClassId, Vec<FeatureVector>> = HashMap::new();
    let mut seen_rows: HashSet<(ClassId, Vec<u64>)> = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| DatasetError::Parse {
            line: line_no,
            message,
        };
        let Some(d) = dim else {
            let value = line
                .strip_prefix("dim=")
                .ok_or_else(|| parse_err(format!("expected header `dim=<d>`, found `{line}`")))?;
            let d: usize = value
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("invalid dimension `{value}`")))?;
            if d == 0 {
                return Err(parse_err("dimension must be positive".into()));
            }
            dim = Some(d);
            continue;
        };
        let mut fields = line.split(',');
        let class_token = fields.next().unwrap_or_default().trim();
        let class_id: ClassId = class_token
            .parse()
            .map_err(|_| parse_err(format!("invalid class id `{class_token}`")))?;
        let values = fields
            .map(|tok| parse_f64(tok).ok_or_else(|| parse_err(format!("invalid value `{}`", tok.trim()))))
            .collect::<Result<Vec<f64>, _>>()?;
        if values.len() != d {
            return Err(parse_err(format!(
                "row has {} values, expected {}",
                values.len(),
                d
            )));
        }
        let key = (class_id, values.iter().map(|v| v.to_bits()).collect());
        if !seen_rows.insert(key) {
            return Err(parse_err(format!("duplicate row for class {class_id}")));
        }
        rows.entry(class_id)
            .or_insert_with(|| {
                order.push(class_id);
                Vec::new()
            })
            .push(values);
    }

    let dim = dim.ok_or(DatasetError::Parse {
        line: 1,
        message: "missing `dim=<d>` header".into(),
    })?;
    let classes = order
        .into_iter()
        .map(|class_id| ClassRecord {
            class_id,
            examples: rows.remove(&class_id).unwrap_or_default(),
        })
        .collect();
    DatasetTable::new(dim, classes)
}

pub fn load_feature_dataset(path: impl AsRef<Path>) -> Result<DatasetTable, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_feature_dataset(&text)
}

pub fn render_feature_dataset(table: &DatasetTable) -> String {
    let mut out = format!("dim={}\n", table.dim);
    for class in &table.classes {
        for example in &class.examples {
            out.push_str(&class.class_id.to_string());
            for v in example {
                let _ = write!(out, ",{}", render_f64(*v));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_feature_dataset(
    table: &DatasetTable,
    path: impl AsRef<Path>,
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    fs::write(path, render_feature_dataset(table)).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Partitions the classes of `table` into a meta-train pool of
/// `n_train_classes` classes and a meta-test pool with the rest.
///
/// Membership is a seeded permutation of the class list; both sides keep the
/// original table order.
pub fn split_classes(
    table: &DatasetTable,
    n_train_classes: usize,
    seed: u64,
) -> Result<MetaSplit, DatasetError> {
    let total = table.num_classes();
    if n_train_classes == 0 || n_train_classes >= total {
        return Err(DatasetError::Argument(format!(
            "n_train_classes must be in 1..{total}, got {n_train_classes}"
        )));
    }
    let mut rng = RngState::new(seed);
    let drawn = rng.sample_indices(total, n_train_classes);
    let train_set: BTreeSet<usize> = drawn.into_iter().collect();

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, class) in table.classes.iter().enumerate() {
        if train_set.contains(&i) {
            train.push(class.clone());
        } else {
            test.push(class.clone());
        }
    }
    Ok(MetaSplit {
        meta_train: DatasetTable::new(table.dim, train)?,
        meta_test: DatasetTable::new(table.dim, test)?,
    })
}

/// Parameters of an isotropic Gaussian class mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub class_std: f64,
    pub mean_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(DatasetError::Argument(
                "num_classes, dim and samples_per_class must be positive".into(),
            ));
        }
        if !(self.class_std > 0.0 && self.class_std.is_finite()) {
            return Err(DatasetError::Argument("class_std must be positive".into()));
        }
        // mean_scale = 0 is accepted: it is the indistinguishable-classes limit.
        if !(self.mean_scale >= 0.0 && self.mean_scale.is_finite()) {
            return Err(DatasetError::Argument(
                "mean_scale must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// The true class means, drawn from the leading part of the seeded stream.
    pub fn class_means(&self) -> Result<Vec<FeatureVector>, DatasetError> {
        self.validate()?;
        let mut rng = RngState::new(self.seed);
        Ok(draw_means(self, &mut rng))
    }
}

fn draw_means(spec: &SyntheticSpec, rng: &mut RngState) -> Vec<FeatureVector> {
    (0..spec.num_classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.mean_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn draw_point(mean: &[f64], std: f64, rng: &mut impl Rng) -> FeatureVector {
    mean.iter()
        .map(|m| m + std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws `samples_per_class` points per class around seeded class means.
/// Class ids are `0..num_classes`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetTable, DatasetError> {
    spec.validate()?;
    let mut rng = RngState::new(spec.seed);
    let means = draw_means(spec, &mut rng);
    let classes = means
        .iter()
        .enumerate()
        .map(|(c, mean)| ClassRecord {
            class_id: c as ClassId,
            examples: (0..spec.samples_per_class)
                .map(|_| draw_point(mean, spec.class_std, &mut rng))
                .collect(),
        })
        .collect();
    DatasetTable::new(spec.dim, classes)
}

fn nearest_mean(x: &[f64], means: &[&FeatureVector]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, m) in means.iter().enumerate() {
        let d: f64 = x.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Monte-Carlo accuracy of the Bayes-optimal classifier for synthetic
/// episodes: it knows every class mean and the shared isotropic covariance,
/// so its decision is the nearest true mean among the episode's classes.
///
/// Each trial draws `n_way` classes uniformly and fresh query points; the
/// result is the mean of per-episode accuracies.
pub fn bayes_oracle_accuracy(
    spec: &SyntheticSpec,
    episode_spec: &EpisodeSpec,
    trials: usize,
    seed: u64,
) -> Result<f64, DatasetError> {
    let means = spec.class_means()?;
    if episode_spec.n_way > spec.num_classes {
        return Err(DatasetError::Argument(format!(
            "n_way {} exceeds {} classes",
            episode_spec.n_way, spec.num_classes
        )));
    }
    if trials == 0 {
        return Err(DatasetError::Argument("trials must be positive".into()));
    }
    let per_class = match episode_spec.query_per_class {
        QueryCount::AllRemaining => spec.samples_per_class.saturating_sub(episode_spec.k_shot),
        QueryCount::Fixed(q) => q,
    }
    .max(1);
    let root = RngState::new(seed);
    let mut total = 0.0;
    for t in 0..trials {
        let mut rng = root.fork(t as u64);
        let chosen = rng.sample_indices(spec.num_classes, episode_spec.n_way);
        let episode_means: Vec<&FeatureVector> = chosen.iter().map(|&c| &means[c]).collect();
        let mut correct = 0usize;
        for (label, mean) in episode_means.iter().enumerate() {
            for _ in 0..per_class {
                let x = draw_point(mean, spec.class_std, &mut rng);
                if nearest_mean(&x, &episode_means) == label {
                    correct += 1;
                }
            }
        }
        total += correct as f64 / (per_class * episode_spec.n_way) as f64;
    }
    Ok(total / trials as f64)
}

/// Bayes-optimal predictions for the query of a concrete episode, given the
/// true means indexed by class id.
pub fn bayes_episode_predictions(
    means: &[FeatureVector],
    episode: &crate::sampler::Episode,
) -> Vec<usize> {
    let episode_means: Vec<&FeatureVector> = episode
        .class_map
        .iter()
        .map(|&id| &means[id as usize])
        .collect();
    episode
        .query
        .iter()
        .map(|ex| nearest_mean(&ex.features, &episode_means))
        .collect()
}
