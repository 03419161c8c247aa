//! A quick oracle suite runnable from the command line.

use std::io::Write;

use rand_distr::StandardNormal;

use crate::api::{meta_fit, MetaLearnerSpec, MethodConfig};
use crate::dataset::{generate_synthetic, SyntheticSpec};
use crate::evaluation::{ci95, evaluate_learner, EvalOptions, EvalOutcome};
use crate::fomaml::{loss_and_grad, MlpParams};
use crate::heads::{sinkhorn, SinkhornConfig};
use crate::rng::RngState;
use crate::sampler::{sample_episode, EpisodeSpec, QueryCount};

type Check = fn() -> Result<(), String>;

fn sinkhorn_matches_fixed_point() -> Result<(), String> {
    let mut rng = RngState::new(1);
    let (n, m, reg) = (6, 4, 0.5);
    let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.unit_f64()).collect()).collect();
    let (r, c) = (vec![1.0 / n as f64; n], vec![1.0 / m as f64; m]);
    let cfg = SinkhornConfig {
        reg,
        max_iters: 10_000,
        tol: 1e-13,
    };
    let plan = sinkhorn(&cost, &r, &c, &cfg).map_err(|e| e.to_string())?;

    let k: Vec<Vec<f64>> = cost.iter().map(|row| row.iter().map(|x| (-x / reg).exp()).collect()).collect();
    let (mut u, mut v) = (vec![1.0; n], vec![1.0; m]);
    for _ in 0..10_000 {
        for i in 0..n {
            u[i] = r[i] / (0..m).map(|j| k[i][j] * v[j]).sum::<f64>();
        }
        for j in 0..m {
            v[j] = c[j] / (0..n).map(|i| k[i][j] * u[i]).sum::<f64>();
        }
    }
    for i in 0..n {
        for j in 0..m {
            let want = u[i] * k[i][j] * v[j];
            if (plan.matrix[i][j] - want).abs() > 1e-9 {
                return Err(format!("entry ({i},{j}): {} vs {want}", plan.matrix[i][j]));
            }
        }
    }
    Ok(())
}

fn mlp_gradient_matches_differences() -> Result<(), String> {
    let mut rng = RngState::new(2);
    let params = MlpParams::init(4, 6, 3, &mut rng);
    let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 3)).collect();
    let loss = |p: &MlpParams| loss_and_grad(p, &batch).map(|(l, _)| l).map_err(|e| e.to_string());
    let (_, grad) = loss_and_grad(&params, &batch).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grad.iter().copied().collect();
    let h = 1e-6;
    for (i, g) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        let mut minus = params.clone();
        *plus.iter_mut().nth(i).expect("index in range") += h;
        *minus.iter_mut().nth(i).expect("index in range") -= h;
        let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
        if rel > 1e-4 {
            return Err(format!("parameter {i}: analytic {g}, numeric {fd}"));
        }
    }
    Ok(())
}

fn separated_classes_are_solved() -> Result<(), String> {
    let table = generate_synthetic(&SyntheticSpec {
        num_classes: 10,
        dim: 8,
        samples_per_class: 10,
        class_std: 0.01,
        mean_scale: 1.0,
        seed: 3,
    })
    .map_err(|e| e.to_string())?;
    let spec = EpisodeSpec::new(5, 1, QueryCount::AllRemaining).map_err(|e| e.to_string())?;
    for name in ["proto", "ptmap", "qda", "rectified"] {
        let method = MethodConfig::default_for(name).map_err(|e| e.to_string())?;
        let learner = meta_fit(&MetaLearnerSpec::new(method), &table, 0).map_err(|e| e.to_string())?;
        let options = EvalOptions {
            episode_count: 50,
            ..EvalOptions::new(4)
        };
        match evaluate_learner(&learner, &table, &spec, &options).map_err(|e| e.to_string())? {
            EvalOutcome::Completed { aggregate, .. } if aggregate.mean >= 0.99 => {}
            other => return Err(format!("{name}: {other:?}")),
        }
    }
    Ok(())
}

fn episodes_have_exact_structure() -> Result<(), String> {
    let table = generate_synthetic(&SyntheticSpec {
        num_classes: 20,
        dim: 2,
        samples_per_class: 20,
        class_std: 1.0,
        mean_scale: 1.0,
        seed: 5,
    })
    .map_err(|e| e.to_string())?;
    let spec = EpisodeSpec::new(5, 1, QueryCount::AllRemaining).map_err(|e| e.to_string())?;
    let mut rng = RngState::new(6);
    for _ in 0..200 {
        let ep = sample_episode(&table, &spec, &mut rng).map_err(|e| e.to_string())?;
        if ep.support.len() != 5 || ep.query.len() != 95 {
            return Err(format!("support {} query {}", ep.support.len(), ep.query.len()));
        }
        if ep.query.iter().any(|q| ep.support.iter().any(|s| s.features == q.features)) {
            return Err("support and query overlap".into());
        }
    }
    Ok(())
}

fn ci95_closed_form() -> Result<(), String> {
    let values: Vec<f64> = (0..600).map(|i| (i % 2) as f64).collect();
    let want = 1.96 * (0.25f64 * 600.0 / 599.0).sqrt() / 600f64.sqrt();
    let got = ci95(&values).map_err(|e| e.to_string())?;
    if (got - want).abs() > 1e-15 {
        return Err(format!("{got} vs {want}"));
    }
    Ok(())
}

/// Runs every check, printing one line each; true when all pass.
pub fn run_selftest(out: &mut dyn Write) -> bool {
    let checks: [(&str, Check); 5] = [
        ("sinkhorn fixed point", sinkhorn_matches_fixed_point),
        ("mlp gradient", mlp_gradient_matches_differences),
        ("separated classes", separated_classes_are_solved),
        ("episode structure", episodes_have_exact_structure),
        ("ci95 closed form", ci95_closed_form),
    ];
    let mut all = true;
    for (name, check) in checks {
        let line = match check() {
            Ok(()) => format!("PASS {name}"),
            Err(e) => {
                all = false;
                format!("FAIL {name}: {e}")
            }
        };
        let _ = writeln!(out, "{line}");
    }
    all
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        let mut out = Vec::new();
        assert!(super::run_selftest(&mut out), "{}", String::from_utf8_lossy(&out));
    }
}
