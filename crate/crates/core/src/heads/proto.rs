use std::fmt;
use std::str::FromStr;

use super::{argmin, check_dims, group_support, mean_of, sq_dist, unit_normalize, HeadError};
use crate::dataset::FeatureVector;
use crate::sampler::LabeledExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// Vectors are unit-normalized, then compared with squared Euclidean
    /// distance.
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(HeadError::Parameter(format!("unknown metric `{other}`"))),
        }
    }
}

impl Metric {
    pub(crate) fn embed(&self, v: &[f64]) -> FeatureVector {
        match self {
            Metric::Euclidean => v.to_vec(),
            Metric::Cosine => unit_normalize(v),
        }
    }
}

/// One center per episode label.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub centers: Vec<FeatureVector>,
    pub metric: Metric,
    pub temperature: f64,
}

impl Prototypes {
    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub(crate) fn distances(&self, q: &[f64]) -> Vec<f64> {
        let q = self.metric.embed(q);
        self.centers.iter().map(|c| sq_dist(&q, c)).collect()
    }
}

pub fn compute_prototypes(
    support: &[LabeledExample],
    metric: Metric,
    temperature: f64,
) -> Result<Prototypes, HeadError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(HeadError::Parameter("temperature must be positive".into()));
    }
    let grouped = group_support(support)?;
    let centers = grouped
        .classes
        .iter()
        .map(|members| {
            let embedded: Vec<FeatureVector> = members.iter().map(|v| metric.embed(v)).collect();
            let refs: Vec<&FeatureVector> = embedded.iter().collect();
            mean_of(&refs, grouped.dim)
        })
        .collect();
    Ok(Prototypes {
        centers,
        metric,
        temperature,
    })
}

/// Softmax over negative squared distances scaled by the temperature.
/// Entries that would underflow are floored at the smallest positive
/// normal, so every probability is strictly positive.
pub(crate) fn softmax_neg(dists: &[f64], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = dists.iter().map(|d| -d / temperature).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter()
        .map(|e| (e / total).max(f64::MIN_POSITIVE))
        .collect()
}

/// Per-query probability vectors over the episode labels.
pub fn proto_predict(
    prototypes: &Prototypes,
    query: &[FeatureVector],
) -> Result<Vec<Vec<f64>>, HeadError> {
    check_dims(query, prototypes.dim())?;
    Ok(query
        .iter()
        .map(|q| softmax_neg(&prototypes.distances(q), prototypes.temperature))
        .collect())
}

/// Label of the nearest center for every query.
pub fn nearest_labels(
    prototypes: &Prototypes,
    query: &[FeatureVector],
) -> Result<Vec<usize>, HeadError> {
    check_dims(query, prototypes.dim())?;
    Ok(query
        .iter()
        .map(|q| argmin(&prototypes.distances(q)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::argmax;
    use crate::rng::RngState;
    use rand_distr::StandardNormal;

    fn ex(features: Vec<f64>, label: usize) -> LabeledExample {
        LabeledExample { features, label }
    }

    fn random_support(rng: &mut RngState, n: usize, k: usize, d: usize) -> Vec<LabeledExample> {
        let mut s = Vec::new();
        for label in 0..n {
            for _ in 0..k {
                s.push(ex((0..d).map(|_| rng.sample(StandardNormal)).collect(), label));
            }
        }
        s
    }

    #[test]
    fn one_shot_centers_are_support() {
        let mut rng = RngState::new(1);
        let s = random_support(&mut rng, 5, 1, 4);
        let p = compute_prototypes(&s, Metric::Euclidean, 1.0).unwrap();
        for e in &s {
            assert_eq!(p.centers[e.label], e.features);
        }
    }

    #[test]
    fn symmetric_pair_averages_to_zero() {
        let s = [ex(vec![1.5, -2.0], 0), ex(vec![-1.5, 2.0], 0), ex(vec![3.0, 3.0], 1), ex(vec![3.0, 4.0], 1)];
        let p = compute_prototypes(&s, Metric::Euclidean, 1.0).unwrap();
        assert_eq!(p.centers[0], vec![0.0, 0.0]);
    }

    #[test]
    fn five_shot_mean_matches_recomputation() {
        let mut rng = RngState::new(2);
        let s = random_support(&mut rng, 3, 5, 6);
        let p = compute_prototypes(&s, Metric::Euclidean, 1.0).unwrap();
        for label in 0..3 {
            for j in 0..6 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for e in s.iter().filter(|e| e.label == label) {
                    acc += e.features[j];
                    n += 1.0;
                }
                assert!((p.centers[label][j] - acc / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_centers_use_normalized_support() {
        let s = [ex(vec![3.0, 0.0], 0), ex(vec![0.0, 5.0], 1)];
        let p = compute_prototypes(&s, Metric::Cosine, 1.0).unwrap();
        assert_eq!(p.centers, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let labels = nearest_labels(&p, &[vec![10.0, 1.0], vec![0.1, 7.0]]).unwrap();
        assert_eq!(labels, vec![0, 1]);
    }

    #[test]
    fn equidistant_query_is_uniform() {
        let centers: Vec<FeatureVector> = (0..5)
            .map(|i| {
                let mut v = vec![0.0; 5];
                v[i] = 1.0;
                v
            })
            .collect();
        let p = Prototypes {
            centers,
            metric: Metric::Euclidean,
            temperature: 1.0,
        };
        let probs = proto_predict(&p, &[vec![0.0; 5]]).unwrap();
        for x in &probs[0] {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn query_on_center_wins() {
        let mut rng = RngState::new(3);
        let s = random_support(&mut rng, 5, 1, 3);
        let p = compute_prototypes(&s, Metric::Euclidean, 1.0).unwrap();
        let probs = proto_predict(&p, &[p.centers[3].clone()]).unwrap();
        assert_eq!(argmax(&probs[0]), 3);
        assert_eq!(nearest_labels(&p, &[p.centers[3].clone()]).unwrap(), vec![3]);
    }

    #[test]
    fn argmax_invariant_to_temperature() {
        let mut rng = RngState::new(4);
        let s = random_support(&mut rng, 5, 2, 4);
        let p1 = compute_prototypes(&s, Metric::Euclidean, 1.0).unwrap();
        let p10 = Prototypes {
            temperature: 10.0,
            ..p1.clone()
        };
        let queries: Vec<FeatureVector> = (0..1000)
            .map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let a = proto_predict(&p1, &queries).unwrap();
        let b = proto_predict(&p10, &queries).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(argmax(x), argmax(y));
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let s = [ex(vec![0.0, 1.0], 0), ex(vec![1.0, 0.0], 1)];
        let p = compute_prototypes(&s, Metric::Euclidean, 1.0).unwrap();
        assert!(matches!(
            proto_predict(&p, &[vec![1.0]]),
            Err(HeadError::Dimension { expected: 2, found: 1 })
        ));
        assert!(compute_prototypes(&s, Metric::Euclidean, 0.0).is_err());
    }
}
