//! Entropic optimal transport by alternating scaling with log-domain
//! stabilization.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SinkhornError {
    #[error("cost matrix is empty or ragged")]
    Shape,
    #[error("cost matrix contains a non-finite entry")]
    NonFiniteCost,
    #[error("marginals must be positive and sum to 1: {0}")]
    Marginals(String),
    #[error("transport kernel underflowed; increase the regularization (reg = {reg})")]
    Underflow { reg: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub reg: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            reg: 0.1,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `rows × cols`, row-major.
    pub matrix: Vec<Vec<f64>>,
    pub row_marginals: Vec<f64>,
    pub col_marginals: Vec<f64>,
    pub iterations: usize,
    /// L1 distance of the plan's row and column sums to their targets.
    pub marginal_error: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.matrix.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.col_marginals.len()];
        for row in &self.matrix {
            for (s, x) in sums.iter_mut().zip(row) {
                *s += x;
            }
        }
        sums
    }
}

fn check_marginals(name: &str, m: &[f64], len: usize) -> Result<(), SinkhornError> {
    if m.len() != len {
        return Err(SinkhornError::Marginals(format!(
            "{name} has length {}, expected {len}",
            m.len()
        )));
    }
    if m.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(SinkhornError::Marginals(format!("{name} has a non-positive entry")));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SinkhornError::Marginals(format!("{name} sums to {total}")));
    }
    Ok(())
}

/// Scalings are folded into the log potentials once either leaves
/// `[e^-ABSORB, e^ABSORB]`.
const ABSORB: f64 = 50.0;

/// Solves `min <P, C> - reg * H(P)` subject to the given marginals.
///
/// The plan is kept as `P_ij = u_i K_ij v_j` with the stabilized kernel
/// `K_ij = exp(f_i + g_j - C_ij / reg)`. Row and column scalings alternate;
/// whenever a scaling grows large it is absorbed into the log potentials
/// `f`, `g` and the kernel is rebuilt, so large `C / reg` never reaches a
/// bare exponential. Each iteration ends with exact column sums, so the
/// convergence test uses the row residual. Stops once the total marginal
/// error is at most `tol`, or after `max_iters` iterations.
pub fn sinkhorn(
    cost: &[Vec<f64>],
    row_marginals: &[f64],
    col_marginals: &[f64],
    config: &SinkhornConfig,
) -> Result<TransportPlan, SinkhornError> {
    if !(config.reg > 0.0) || !(config.tol > 0.0) || config.max_iters == 0 {
        return Err(SinkhornError::Config(
            "reg and tol must be positive, max_iters at least 1".into(),
        ));
    }
    let rows = cost.len();
    let cols = cost.first().map(Vec::len).unwrap_or(0);
    if rows == 0 || cols == 0 || cost.iter().any(|r| r.len() != cols) {
        return Err(SinkhornError::Shape);
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(SinkhornError::NonFiniteCost);
    }
    check_marginals("row marginals", row_marginals, rows)?;
    check_marginals("column marginals", col_marginals, cols)?;

    let scaled: Vec<f64> = cost.iter().flatten().map(|c| -c / config.reg).collect();
    if scaled.iter().any(|x| !x.is_finite()) {
        return Err(SinkhornError::Underflow { reg: config.reg });
    }
    // Start from row-wise shifts so every kernel row has a unit maximum.
    let mut f: Vec<f64> = (0..rows)
        .map(|i| -scaled[i * cols..(i + 1) * cols].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut g = vec![0.0; cols];
    let mut kernel = vec![0.0; rows * cols];
    let rebuild = |kernel: &mut [f64], f: &[f64], g: &[f64]| -> Result<(), SinkhornError> {
        for i in 0..rows {
            for j in 0..cols {
                kernel[i * cols + j] = (f[i] + g[j] + scaled[i * cols + j]).exp();
            }
        }
        let dead_row = (0..rows).any(|i| kernel[i * cols..(i + 1) * cols].iter().all(|k| *k == 0.0));
        let dead_col = (0..cols).any(|j| (0..rows).all(|i| kernel[i * cols + j] == 0.0));
        if dead_row || dead_col || kernel.iter().any(|k| !k.is_finite()) {
            return Err(SinkhornError::Underflow { reg: config.reg });
        }
        Ok(())
    };
    rebuild(&mut kernel, &f, &g)?;

    let mut u = vec![1.0; rows];
    let mut v = vec![1.0; cols];
    let mut kv = vec![0.0; rows];
    let mut iterations = 0;
    let bound = ABSORB.exp();

    while iterations < config.max_iters {
        iterations += 1;
        for i in 0..rows {
            let s: f64 = kernel[i * cols..(i + 1) * cols].iter().zip(&v).map(|(k, vj)| k * vj).sum();
            u[i] = row_marginals[i] / s;
        }
        for j in 0..cols {
            let s: f64 = (0..rows).map(|i| kernel[i * cols + j] * u[i]).sum();
            v[j] = col_marginals[j] / s;
        }
        let mut error = 0.0;
        for i in 0..rows {
            kv[i] = kernel[i * cols..(i + 1) * cols].iter().zip(&v).map(|(k, vj)| k * vj).sum();
            error += (u[i] * kv[i] - row_marginals[i]).abs();
        }
        if u.iter().chain(&v).any(|x| !x.is_finite() || *x == 0.0) {
            return Err(SinkhornError::Underflow { reg: config.reg });
        }
        if error <= config.tol {
            break;
        }
        if u.iter().chain(&v).any(|x| *x > bound || *x < 1.0 / bound) {
            f.iter_mut().zip(&u).for_each(|(fi, ui)| *fi += ui.ln());
            g.iter_mut().zip(&v).for_each(|(gj, vj)| *gj += vj.ln());
            u.iter_mut().for_each(|x| *x = 1.0);
            v.iter_mut().for_each(|x| *x = 1.0);
            rebuild(&mut kernel, &f, &g)?;
        }
    }

    let matrix: Vec<Vec<f64>> = (0..rows)
        .map(|i| (0..cols).map(|j| u[i] * kernel[i * cols + j] * v[j]).collect())
        .collect();
    let mut plan = TransportPlan {
        matrix,
        row_marginals: row_marginals.to_vec(),
        col_marginals: col_marginals.to_vec(),
        iterations,
        marginal_error: 0.0,
    };
    plan.marginal_error = plan
        .row_sums()
        .iter()
        .zip(row_marginals)
        .chain(plan.col_sums().iter().zip(col_marginals))
        .map(|(s, m)| (s - m).abs())
        .sum();
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    /// Plain-domain fixed point u = r / (K v), v = c / (K^T u).
    fn oracle(cost: &[Vec<f64>], r: &[f64], c: &[f64], reg: f64) -> Vec<Vec<f64>> {
        let k: Vec<Vec<f64>> = cost
            .iter()
            .map(|row| row.iter().map(|x| (-x / reg).exp()).collect())
            .collect();
        let (n, m) = (r.len(), c.len());
        let mut u = vec![1.0; n];
        let mut v = vec![1.0; m];
        for _ in 0..100_000 {
            for i in 0..n {
                u[i] = r[i] / (0..m).map(|j| k[i][j] * v[j]).sum::<f64>();
            }
            for j in 0..m {
                v[j] = c[j] / (0..n).map(|i| k[i][j] * u[i]).sum::<f64>();
            }
            let err: f64 = (0..n)
                .map(|i| ((0..m).map(|j| u[i] * k[i][j] * v[j]).sum::<f64>() - r[i]).abs())
                .sum();
            if err < 1e-15 {
                break;
            }
        }
        (0..n)
            .map(|i| (0..m).map(|j| u[i] * k[i][j] * v[j]).collect())
            .collect()
    }

    #[test]
    fn constant_cost_gives_uniform_plan() {
        let cost = vec![vec![0.7; 4]; 6];
        let plan = sinkhorn(&cost, &uniform(6), &uniform(4), &SinkhornConfig::default()).unwrap();
        for x in plan.matrix.iter().flatten() {
            assert!((x - 1.0 / 24.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_reg_concentrates_on_diagonal() {
        let cost = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let cfg = SinkhornConfig {
            reg: 0.01,
            ..Default::default()
        };
        let plan = sinkhorn(&cost, &uniform(2), &uniform(2), &cfg).unwrap();
        assert!(plan.matrix[0][1] < 0.01 && plan.matrix[1][0] < 0.01);
        assert!((plan.matrix[0][0] - 0.5).abs() < 0.01);
    }

    #[test]
    fn random_3x3_matches_fixed_point_oracle() {
        let mut rng = RngState::new(31);
        let cfg = SinkhornConfig {
            reg: 0.2,
            max_iters: 10_000,
            tol: 1e-14,
        };
        for _ in 0..20 {
            let cost: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.unit_f64()).collect()).collect();
            let plan = sinkhorn(&cost, &uniform(3), &uniform(3), &cfg).unwrap();
            let expected = oracle(&cost, &uniform(3), &uniform(3), cfg.reg);
            for (a, b) in plan.matrix.iter().flatten().zip(expected.iter().flatten()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn marginal_error_non_increasing_in_iterations() {
        let mut rng = RngState::new(5);
        for _ in 0..20 {
            let cost: Vec<Vec<f64>> = (0..10).map(|_| (0..5).map(|_| rng.unit_f64()).collect()).collect();
            let mut last = f64::INFINITY;
            for iters in 1..30 {
                let cfg = SinkhornConfig {
                    reg: 0.05,
                    max_iters: iters,
                    tol: 1e-300,
                };
                let plan = sinkhorn(&cost, &uniform(10), &uniform(5), &cfg).unwrap();
                assert!(plan.marginal_error <= last + 1e-15, "{} > {last}", plan.marginal_error);
                last = plan.marginal_error;
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = SinkhornConfig::default();
        assert_eq!(sinkhorn(&[], &[], &[], &cfg), Err(SinkhornError::Shape));
        let cost = vec![vec![0.0, f64::NAN]];
        assert_eq!(sinkhorn(&cost, &[1.0], &uniform(2), &cfg), Err(SinkhornError::NonFiniteCost));
        let cost = vec![vec![0.0, 1.0]];
        assert!(matches!(
            sinkhorn(&cost, &[0.5], &uniform(2), &cfg),
            Err(SinkhornError::Marginals(_))
        ));
        let huge = vec![vec![0.0, 1e300]];
        let tiny = SinkhornConfig {
            reg: 1e-10,
            ..cfg
        };
        assert!(matches!(
            sinkhorn(&huge, &[1.0], &uniform(2), &tiny),
            Err(SinkhornError::Underflow { .. })
        ));
    }
}
