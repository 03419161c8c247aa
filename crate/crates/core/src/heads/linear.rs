use super::{argmax, check_dims, group_support, HeadError};
use crate::dataset::FeatureVector;
use crate::sampler::LabeledExample;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearHeadConfig {
    pub epochs: usize,
    pub step_size: f64,
}

impl Default for LinearHeadConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            step_size: 0.001,
        }
    }
}

/// Multinomial logistic regression over episode labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub n_way: usize,
    pub dim: usize,
    /// `n_way × dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub config: LinearHeadConfig,
    /// Support loss before each epoch, then after the last one.
    pub losses: Vec<f64>,
}

impl LinearHead {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        logits(&self.weights, &self.bias, x)
    }
}

fn logits(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let dim = x.len();
    bias.iter()
        .enumerate()
        .map(|(c, b)| b + weights[c * dim..(c + 1) * dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Mean softmax cross-entropy and its gradient with respect to the weights
/// (`n_way × dim`, row-major) and the bias.
pub fn cross_entropy_and_grad(
    weights: &[f64],
    bias: &[f64],
    data: &[(&[f64], usize)],
) -> (f64, Vec<f64>, Vec<f64>) {
    let n_way = bias.len();
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; n_way];
    let mut loss = 0.0;
    let scale = 1.0 / data.len() as f64;
    for (x, y) in data {
        let z = logits(weights, bias, x);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += (lse - z[*y]) * scale;
        for c in 0..n_way {
            let delta = ((z[c] - lse).exp() - if c == *y { 1.0 } else { 0.0 }) * scale;
            gb[c] += delta;
            for (g, v) in gw[c * x.len()..(c + 1) * x.len()].iter_mut().zip(x.iter()) {
                *g += delta * v;
            }
        }
    }
    (loss, gw, gb)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Full-batch Adam from a zero initialization; one epoch is one update.
pub fn linear_head_fit(
    support: &[LabeledExample],
    config: &LinearHeadConfig,
) -> Result<LinearHead, HeadError> {
    if config.epochs == 0 {
        return Err(HeadError::Parameter("epochs must be at least 1".into()));
    }
    if !(config.step_size > 0.0) {
        return Err(HeadError::Parameter("step size must be positive".into()));
    }
    let grouped = group_support(support)?;
    let (n_way, dim) = (grouped.n_way(), grouped.dim);
    let data: Vec<(&[f64], usize)> = support.iter().map(|e| (e.features.as_slice(), e.label)).collect();

    let mut weights = vec![0.0; n_way * dim];
    let mut bias = vec![0.0; n_way];
    let mut opt_w = Adam::new(weights.len());
    let mut opt_b = Adam::new(n_way);
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, gw, gb) = cross_entropy_and_grad(&weights, &bias, &data);
        if !loss.is_finite() {
            return Err(HeadError::Divergence { epoch });
        }
        losses.push(loss);
        opt_w.step(&mut weights, &gw, config.step_size);
        opt_b.step(&mut bias, &gb, config.step_size);
    }
    let (loss, _, _) = cross_entropy_and_grad(&weights, &bias, &data);
    if !loss.is_finite() || weights.iter().chain(&bias).any(|x| !x.is_finite()) {
        return Err(HeadError::Divergence {
            epoch: config.epochs,
        });
    }
    losses.push(loss);
    Ok(LinearHead {
        n_way,
        dim,
        weights,
        bias,
        config: *config,
        losses,
    })
}

pub fn linear_head_predict(head: &LinearHead, query: &[FeatureVector]) -> Result<Vec<usize>, HeadError> {
    check_dims(query, head.dim)?;
    Ok(query.iter().map(|q| argmax(&head.logits(q))).collect())
}
