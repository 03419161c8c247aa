use super::proto::softmax_neg;
use super::{compute_prototypes, nearest_labels, HeadError, Metric, Prototypes};
use crate::dataset::FeatureVector;
use crate::sampler::LabeledExample;

/// Support prototypes after one rectification round with the query set.
///
/// Every query is soft-assigned with the prototype softmax; each center
/// becomes the mean of its support examples (weight 1 each) and all queries
/// weighted by their assignment probability to that class.
pub fn rectified_prototypes(
    support: &[LabeledExample],
    query: &[FeatureVector],
    metric: Metric,
    temperature: f64,
) -> Result<Prototypes, HeadError> {
    let initial = compute_prototypes(support, metric, temperature)?;
    super::check_dims(query, initial.dim())?;
    let dim = initial.dim();
    let n_way = initial.centers.len();

    let mut sums = vec![vec![0.0; dim]; n_way];
    let mut mass = vec![0.0; n_way];
    for ex in support {
        let v = metric.embed(&ex.features);
        sums[ex.label].iter_mut().zip(&v).for_each(|(s, x)| *s += x);
        mass[ex.label] += 1.0;
    }
    for q in query {
        let probs = softmax_neg(&initial.distances(q), temperature);
        let v = metric.embed(q);
        for (label, p) in probs.iter().enumerate() {
            sums[label].iter_mut().zip(&v).for_each(|(s, x)| *s += p * x);
            mass[label] += p;
        }
    }
    let centers = sums
        .into_iter()
        .zip(mass)
        .map(|(s, m)| s.into_iter().map(|x| x / m).collect())
        .collect();
    Ok(Prototypes {
        centers,
        metric,
        temperature,
    })
}

pub fn rectified_proto_predict(
    support: &[LabeledExample],
    query: &[FeatureVector],
    metric: Metric,
    temperature: f64,
) -> Result<Vec<usize>, HeadError> {
    let protos = rectified_prototypes(support, query, metric, temperature)?;
    nearest_labels(&protos, query)
}
