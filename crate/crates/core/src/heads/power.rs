use super::{unit_normalize, HeadError};
use crate::dataset::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerTransformParams {
    pub beta: f64,
    pub epsilon: f64,
    pub unit_normalize: bool,
}

impl Default for PowerTransformParams {
    fn default() -> Self {
        Self {
            beta: 0.5,
            epsilon: 1e-6,
            unit_normalize: true,
        }
    }
}

/// Coordinate-wise `(v - shift + epsilon)^beta`, optionally followed by unit
/// normalization of each vector.
///
/// `shift_j` is the minimum of coordinate `j` over the whole set when that
/// minimum is negative, and zero otherwise, so non-negative inputs are used
/// as-is and signed inputs are moved onto the non-negative orthant first.
pub fn power_transform(
    features: &[FeatureVector],
    params: &PowerTransformParams,
) -> Result<Vec<FeatureVector>, HeadError> {
    if !(params.epsilon >= 0.0) || !params.beta.is_finite() {
        return Err(HeadError::Parameter(
            "power transform needs finite beta and epsilon >= 0".into(),
        ));
    }
    let Some(first) = features.first() else {
        return Ok(Vec::new());
    };
    let dim = first.len();
    let mut shift = vec![0.0f64; dim];
    for v in features {
        for (s, x) in shift.iter_mut().zip(v) {
            *s = s.min(*x);
        }
    }
    features
        .iter()
        .map(|v| {
            let u: FeatureVector = v
                .iter()
                .zip(&shift)
                .map(|(x, s)| (x - s + params.epsilon).powf(params.beta))
                .collect();
            if u.iter().any(|x| !x.is_finite()) {
                return Err(HeadError::Numeric(
                    "power transform produced a non-finite value; raise epsilon".into(),
                ));
            }
            Ok(if params.unit_normalize {
                unit_normalize(&u)
            } else {
                u
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use rand_distr::StandardNormal;

    #[test]
    fn unit_beta_is_identity_on_non_negative_input() {
        let x = vec![vec![0.0, 2.5, 7.0], vec![1.0, 0.25, 3.0]];
        let p = PowerTransformParams {
            beta: 1.0,
            epsilon: 0.0,
            unit_normalize: false,
        };
        assert_eq!(power_transform(&x, &p).unwrap(), x);
    }

    #[test]
    fn square_roots_exact() {
        let p = PowerTransformParams {
            beta: 0.5,
            epsilon: 0.0,
            unit_normalize: false,
        };
        assert_eq!(power_transform(&[vec![4.0, 16.0]], &p).unwrap(), vec![vec![2.0, 4.0]]);
    }

    #[test]
    fn signed_input_is_shifted() {
        let p = PowerTransformParams {
            beta: 1.0,
            epsilon: 0.0,
            unit_normalize: false,
        };
        let out = power_transform(&[vec![-2.0, 1.0], vec![3.0, 5.0]], &p).unwrap();
        assert_eq!(out, vec![vec![0.0, 1.0], vec![5.0, 5.0]]);
    }

    #[test]
    fn normalized_output_has_unit_norm() {
        let out = power_transform(&[vec![-1.0, 4.0, 9.0]], &PowerTransformParams::default()).unwrap();
        let n: f64 = out[0].iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_beta_at_zero_is_numeric_error() {
        let p = PowerTransformParams {
            beta: -1.0,
            epsilon: 0.0,
            unit_normalize: false,
        };
        assert!(matches!(power_transform(&[vec![0.0]], &p), Err(HeadError::Numeric(_))));
    }

    fn skewness(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
        m3 / m2.powf(1.5)
    }

    #[test]
    fn reduces_skew_of_log_normal_cloud() {
        let mut rng = RngState::new(12);
        let cloud: Vec<FeatureVector> = (0..5000)
            .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal).exp()).collect())
            .collect();
        let p = PowerTransformParams {
            unit_normalize: false,
            ..Default::default()
        };
        let out = power_transform(&cloud, &p).unwrap();
        for j in 0..3 {
            let before: Vec<f64> = cloud.iter().map(|v| v[j]).collect();
            let after: Vec<f64> = out.iter().map(|v| v[j]).collect();
            assert!(skewness(&after).abs() < skewness(&before).abs());
        }
    }
}
