//! Transductive center estimation: power-transformed features, class centers
//! refined by optimal transport of the query set onto the classes.

use super::{
    argmin, check_dims, group_support, mean_of, power_transform, sinkhorn, sq_dist, HeadError,
    PowerTransformParams, SinkhornConfig,
};
use crate::dataset::FeatureVector;
use crate::sampler::LabeledExample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtMapConfig {
    pub power: PowerTransformParams,
    pub sinkhorn: SinkhornConfig,
    pub n_iters: usize,
    pub step_size: f64,
}

impl Default for PtMapConfig {
    fn default() -> Self {
        Self {
            power: PowerTransformParams::default(),
            sinkhorn: SinkhornConfig::default(),
            n_iters: 20,
            step_size: 0.2,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Labels every query by its closest refined class center.
///
/// Each round transports the query set (uniform mass) onto the classes
/// (equal mass per class) under median-normalized squared distances, then
/// moves every center `step_size` of the way toward the mean of its support
/// examples and plan-weighted queries.
pub fn ptmap_fit_predict(
    support: &[LabeledExample],
    query: &[FeatureVector],
    config: &PtMapConfig,
) -> Result<Vec<usize>, HeadError> {
    let grouped = group_support(support)?;
    check_dims(query, grouped.dim)?;
    if query.is_empty() {
        return Ok(Vec::new());
    }
    let (n_way, dim) = (grouped.n_way(), grouped.dim);

    let mut all: Vec<FeatureVector> = Vec::with_capacity(support.len() + query.len());
    all.extend(support.iter().map(|e| e.features.clone()));
    all.extend(query.iter().cloned());
    let transformed = power_transform(&all, &config.power)?;
    let (t_support, t_query) = transformed.split_at(support.len());

    let mut members: Vec<Vec<&FeatureVector>> = vec![Vec::new(); n_way];
    for (ex, v) in support.iter().zip(t_support) {
        members[ex.label].push(v);
    }
    let mut centers: Vec<FeatureVector> = members.iter().map(|m| mean_of(m, dim)).collect();

    let rows = vec![1.0 / t_query.len() as f64; t_query.len()];
    let cols = vec![1.0 / n_way as f64; n_way];
    for _ in 0..config.n_iters {
        let mut cost: Vec<Vec<f64>> = t_query
            .iter()
            .map(|q| centers.iter().map(|c| sq_dist(q, c)).collect())
            .collect();
        let mut flat: Vec<f64> = cost.iter().flatten().copied().collect();
        let scale = median(&mut flat);
        if scale > 0.0 {
            cost.iter_mut().flatten().for_each(|c| *c /= scale);
        }
        let plan = sinkhorn(&cost, &rows, &cols, &config.sinkhorn)?;

        for (label, center) in centers.iter_mut().enumerate() {
            let mut target = vec![0.0; dim];
            let mut mass = 0.0;
            for v in &members[label] {
                target.iter_mut().zip(v.iter()).for_each(|(t, x)| *t += x);
                mass += 1.0;
            }
            for (i, q) in t_query.iter().enumerate() {
                // Rows of the plan carry 1/Q mass; rescale to per-query weights.
                let w = plan.matrix[i][label] * t_query.len() as f64;
                target.iter_mut().zip(q).for_each(|(t, x)| *t += w * x);
                mass += w;
            }
            for (c, t) in center.iter_mut().zip(&target) {
                *c += config.step_size * (t / mass - *c);
            }
        }
    }

    Ok(t_query
        .iter()
        .map(|q| {
            let d: Vec<f64> = centers.iter().map(|c| sq_dist(q, c)).collect();
            argmin(&d)
        })
        .collect())
}
