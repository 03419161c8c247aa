//! Episode-time classifiers on feature embeddings.
//!
//! Every head takes a support set labelled `0..n_way` with the same number
//! of shots per label. Exact ties in any argmax/argmin go to the lowest
//! episode label.

mod linear;
mod power;
mod proto;
mod ptmap;
mod qda;
mod rectified;
mod sinkhorn;

pub use linear::{
    cross_entropy_and_grad, linear_head_fit, linear_head_predict, LinearHead, LinearHeadConfig,
};
pub use power::{power_transform, PowerTransformParams};
pub use proto::{compute_prototypes, nearest_labels, proto_predict, Metric, Prototypes};
pub use ptmap::{ptmap_fit_predict, PtMapConfig};
pub use qda::{qda_fit, qda_predict, QdaModel};
pub use rectified::{rectified_proto_predict, rectified_prototypes};
pub use sinkhorn::{sinkhorn, SinkhornConfig, SinkhornError, TransportPlan};

use thiserror::Error;

use crate::dataset::FeatureVector;
use crate::sampler::LabeledExample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("malformed support set: {0}")]
    Structure(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
    #[error("covariance for class {class} is not positive definite; use shrinkage lambda > 0")]
    Conditioning { class: usize },
    #[error("loss became non-finite at epoch {epoch}; reduce the step size")]
    Divergence { epoch: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Support vectors grouped by episode label.
pub(crate) struct GroupedSupport<'a> {
    pub classes: Vec<Vec<&'a FeatureVector>>,
    pub dim: usize,
}

impl GroupedSupport<'_> {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn k_shot(&self) -> usize {
        self.classes[0].len()
    }
}

/// Checks the N·K structure: labels `0..N`, each exactly K times, one shared
/// dimension.
pub(crate) fn group_support(support: &[LabeledExample]) -> Result<GroupedSupport<'_>, HeadError> {
    let first = support
        .first()
        .ok_or_else(|| HeadError::Structure("support set is empty".into()))?;
    let dim = first.features.len();
    if dim == 0 {
        return Err(HeadError::Structure("zero-dimensional features".into()));
    }
    let n_way = support.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    let mut classes: Vec<Vec<&FeatureVector>> = vec![Vec::new(); n_way];
    for ex in support {
        if ex.features.len() != dim {
            return Err(HeadError::Dimension {
                expected: dim,
                found: ex.features.len(),
            });
        }
        classes[ex.label].push(&ex.features);
    }
    let k = classes[0].len();
    if let Some((label, c)) = classes.iter().enumerate().find(|(_, c)| c.len() != k || c.is_empty()) {
        return Err(HeadError::Structure(format!(
            "label {label} has {} support examples, label 0 has {k}",
            c.len()
        )));
    }
    Ok(GroupedSupport { classes, dim })
}

pub(crate) fn check_dims(query: &[FeatureVector], dim: usize) -> Result<(), HeadError> {
    match query.iter().find(|q| q.len() != dim) {
        Some(q) => Err(HeadError::Dimension {
            expected: dim,
            found: q.len(),
        }),
        None => Ok(()),
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn mean_of(vectors: &[&FeatureVector], dim: usize) -> FeatureVector {
    let mut m = vec![0.0; dim];
    for v in vectors {
        for (acc, x) in m.iter_mut().zip(v.iter()) {
            *acc += x;
        }
    }
    let n = vectors.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

pub(crate) fn unit_normalize(v: &[f64]) -> FeatureVector {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

/// Index of the smallest value; the first one wins exact ties.
pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest value; the first one wins exact ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
