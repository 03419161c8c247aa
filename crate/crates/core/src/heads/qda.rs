use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{argmax, check_dims, group_support, mean_of, HeadError};
use crate::dataset::FeatureVector;
use crate::sampler::LabeledExample;

/// Per-class Gaussian discriminant with covariance shrinkage.
#[derive(Debug, Clone)]
pub struct QdaModel {
    pub means: Vec<FeatureVector>,
    pub covariances: Vec<DMatrix<f64>>,
    pub lambda: f64,
    pub priors: Vec<f64>,
    factors: Vec<Cholesky<f64, Dyn>>,
    log_dets: Vec<f64>,
}

/// Fits one Gaussian per episode label.
///
/// With K ≥ 2 shots the covariance is `(1 - lambda) S_c + lambda s² I`, where
/// `S_c` is the unbiased class scatter and `s²` the mean diagonal of the
/// pooled scatter; the shrinkage target is shared by all classes, so
/// `lambda = 1` gives a nearest-mean rule. With one shot every covariance
/// is the identity.
pub fn qda_fit(support: &[LabeledExample], lambda: f64) -> Result<QdaModel, HeadError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(HeadError::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let grouped = group_support(support)?;
    let (n_way, k, dim) = (grouped.n_way(), grouped.k_shot(), grouped.dim);
    let means: Vec<FeatureVector> = grouped.classes.iter().map(|m| mean_of(m, dim)).collect();

    let covariances: Vec<DMatrix<f64>> = if k == 1 {
        vec![DMatrix::identity(dim, dim); n_way]
    } else {
        let scatters: Vec<DMatrix<f64>> = grouped
            .classes
            .iter()
            .zip(&means)
            .map(|(members, mean)| {
                let mu = DVector::from_column_slice(mean);
                let mut s = DMatrix::zeros(dim, dim);
                for x in members {
                    let c = DVector::from_column_slice(x) - &mu;
                    s += &c * c.transpose();
                }
                s / (k as f64 - 1.0)
            })
            .collect();
        let pooled_trace: f64 = scatters.iter().map(|s| s.trace()).sum::<f64>() / n_way as f64;
        let mut target = pooled_trace / dim as f64;
        if target <= 0.0 {
            target = 1.0;
        }
        scatters
            .into_iter()
            .map(|s| s * (1.0 - lambda) + DMatrix::identity(dim, dim) * (lambda * target))
            .collect()
    };

    let mut factors = Vec::with_capacity(n_way);
    let mut log_dets = Vec::with_capacity(n_way);
    for (class, cov) in covariances.iter().enumerate() {
        let chol = Cholesky::new(cov.clone()).ok_or(HeadError::Conditioning { class })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(HeadError::Conditioning { class });
        }
        factors.push(chol);
        log_dets.push(log_det);
    }

    let total = support.len() as f64;
    let priors = grouped
        .classes
        .iter()
        .map(|m| m.len() as f64 / total)
        .collect();
    Ok(QdaModel {
        means,
        covariances,
        lambda,
        priors,
        factors,
        log_dets,
    })
}

impl QdaModel {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Gaussian log-density of `x` under each class plus its log prior.
    pub fn log_scores(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim() as f64;
        let xv = DVector::from_column_slice(x);
        (0..self.means.len())
            .map(|c| {
                let diff = &xv - DVector::from_column_slice(&self.means[c]);
                let solved = self.factors[c].l_dirty().solve_lower_triangular(&diff);
                let maha = solved.map_or(f64::INFINITY, |z| z.norm_squared());
                -0.5 * (d * std::f64::consts::TAU.ln() + self.log_dets[c] + maha)
                    + self.priors[c].ln()
            })
            .collect()
    }
}

pub fn qda_predict(model: &QdaModel, query: &[FeatureVector]) -> Result<Vec<usize>, HeadError> {
    check_dims(query, model.dim())?;
    Ok(query.iter().map(|q| argmax(&model.log_scores(q))).collect())
}
