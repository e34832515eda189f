//! Mixture likelihood evaluation: class-conditional and marginal pattern
//! probabilities, posteriors, and the log-likelihood `n' log Pr(Y)`.

use nalgebra::{DMatrix, DVector};

use crate::design::{DesignMatrices, ParamVector};
use crate::error::{LcaError, Result};
use crate::patterns::ObservedData;

/// Free parameters beyond this magnitude indicate a boundary-divergent
/// solution (conditional probabilities within ~3e-7 of 0 or 1).
pub const BOUNDARY_LIMIT: f64 = 15.0;

/// All probability tables implied by a parameter vector.
#[derive(Debug, Clone)]
pub struct Probabilities {
    /// T-vector Pr(xi = t).
    pub class_probs: DVector<f64>,
    /// T x R matrix Pr(Y = y_r | xi = t); rows sum to 1.
    pub cond: DMatrix<f64>,
    /// R-vector Pr(Y = y_r).
    pub marginal: DVector<f64>,
    /// R x T matrix Pr(xi = t | Y = y_r); rows sum to 1.
    pub posterior: DMatrix<f64>,
}

/// Softmax with max-subtraction, writing into a slice view.
fn softmax_into(v: &mut DVector<f64>) {
    let max = v.max();
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    *v /= sum;
}

/// Evaluate all probability tables at `theta`.
pub fn evaluate(theta: &ParamVector, design: &DesignMatrices) -> Result<Probabilities> {
    if theta.alpha.iter().any(|v| !v.is_finite())
        || theta.tau.iter().any(|v| !v.is_finite())
        || theta.lambda.iter().any(|v| !v.is_finite())
        || theta.psi.iter().any(|v| !v.is_finite())
    {
        return Err(LcaError::Validation("non-finite parameter".into()));
    }
    let t_count = design.spec.classes;
    let r_count = design.table.len();

    let mut class_logits = design.class_logits(theta);
    softmax_into(&mut class_logits);
    let class_probs = class_logits;

    let mut cond = DMatrix::zeros(t_count, r_count);
    for t in 0..t_count {
        let mut eta = design.linear_predictor(theta, t)?;
        softmax_into(&mut eta);
        cond.row_mut(t).copy_from(&eta.transpose());
    }

    let marginal = cond.transpose() * &class_probs;

    let mut posterior = DMatrix::zeros(r_count, t_count);
    for r in 0..r_count {
        for t in 0..t_count {
            posterior[(r, t)] = class_probs[t] * cond[(t, r)] / marginal[r];
        }
    }

    Ok(Probabilities {
        class_probs,
        cond,
        marginal,
        posterior,
    })
}

/// Log-likelihood `sum_r n_r log Pr(Y = y_r)`. Returns -inf when some
/// observed pattern has zero probability (degenerate evaluation).
pub fn loglik(theta: &ParamVector, design: &DesignMatrices, data: &ObservedData) -> Result<f64> {
    let probs = evaluate(theta, design)?;
    Ok(loglik_from_marginal(&probs.marginal, &data.counts))
}

/// Log-likelihood against a raw counts vector.
pub(crate) fn loglik_at(
    theta: &ParamVector,
    design: &DesignMatrices,
    counts: &DVector<f64>,
) -> Result<f64> {
    let probs = evaluate(theta, design)?;
    Ok(loglik_from_marginal(&probs.marginal, counts))
}

pub(crate) fn loglik_from_marginal(marginal: &DVector<f64>, counts: &DVector<f64>) -> f64 {
    let mut ll = 0.0;
    for r in 0..counts.len() {
        let n = counts[r];
        if n > 0.0 {
            let m = marginal[r];
            if m <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += n * m.ln();
        }
    }
    ll
}

/// True when any free parameter exceeds the boundary limit.
pub fn boundary_flag(theta: &ParamVector, spec: &crate::design::ModelSpec) -> bool {
    theta.max_abs_free(spec) > BOUNDARY_LIMIT
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, Coding, ModelSpec};
    use nalgebra::DVector;

    #[test]
    fn zero_theta_gives_uniform_marginal() {
        let spec = ModelSpec::new(3, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let probs = evaluate(&ParamVector::zeros(&spec), &design).unwrap();
        for r in 0..8 {
            assert!((probs.marginal[r] - 0.125).abs() < 1e-14);
        }
    }

    #[test]
    fn uninformative_item_posterior_equals_prior() {
        // J=1, T=2, lambda=0: the item carries no class information
        let spec = ModelSpec::new(1, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let mut theta = ParamVector::zeros(&spec);
        theta.alpha[0] = 0.7;
        theta.tau[0] = -0.4;
        let probs = evaluate(&theta, &design).unwrap();
        for r in 0..2 {
            for t in 0..2 {
                assert!((probs.posterior[(r, t)] - probs.class_probs[t]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn local_independence_factorizes() {
        // psi = 0: cond equals the product of item-wise Bernoulli probabilities.
        // Study model of the population analyses: J=5, T=2, lambda=0.5, alpha=0.2.
        let spec = ModelSpec::new(5, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let mut theta = ParamVector::zeros(&spec);
        theta.alpha[0] = 0.2;
        for k in 0..5 {
            theta.lambda[(k, 0)] = 0.5;
        }
        let probs = evaluate(&theta, &design).unwrap();
        // Bernoulli oracle: Pr(y_k=1 | t) = sigma(2*(tau_k + l_kt)) under effect coding
        for t in 0..2 {
            let sign: f64 = if t == 0 { 1.0 } else { -1.0 };
            let p1 = 1.0 / (1.0 + (-2.0 * 0.5 * sign).exp());
            for r in 0..32 {
                let mut prod = 1.0;
                for k in 0..5 {
                    let level = design.table.level(r, k);
                    prod *= if level == 1 { p1 } else { 1.0 - p1 };
                }
                assert!(
                    (probs.cond[(t, r)] - prod).abs() < 1e-12,
                    "class {t} pattern {r}"
                );
            }
        }
    }

    #[test]
    fn marginal_normalizes_and_rows_sum() {
        let spec = ModelSpec::new(4, 3, Coding::Effect)
            .unwrap()
            .with_deps(&[(1, 2)])
            .unwrap();
        let design = build_design(&spec).unwrap();
        let mut theta = ParamVector::zeros(&spec);
        let n = spec.free_param_count();
        theta.set_free(
            &spec,
            &DVector::from_iterator(n, (0..n).map(|i| ((i * 31 % 17) as f64 - 8.0) / 10.0)),
        );
        let probs = evaluate(&theta, &design).unwrap();
        assert!((probs.marginal.sum() - 1.0).abs() < 1e-12);
        for t in 0..3 {
            assert!((probs.cond.row(t).sum() - 1.0).abs() < 1e-12);
        }
        for r in 0..16 {
            assert!((probs.posterior.row(r).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn label_swap_leaves_marginal_unchanged() {
        // Swapping the two classes (alpha sign, lambda columns) under effect
        // coding reproduces the same marginal distribution.
        let spec = ModelSpec::new(3, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let mut theta = ParamVector::zeros(&spec);
        theta.alpha[0] = 0.4;
        theta.tau.copy_from_slice(&[0.1, -0.2, 0.3]);
        for k in 0..3 {
            theta.lambda[(k, 0)] = 0.5 + 0.1 * k as f64;
        }
        let mut swapped = theta.clone();
        swapped.alpha[0] = -theta.alpha[0];
        for k in 0..3 {
            swapped.lambda[(k, 0)] = -theta.lambda[(k, 0)];
        }
        let p1 = evaluate(&theta, &design).unwrap();
        let p2 = evaluate(&swapped, &design).unwrap();
        assert!((p1.marginal - p2.marginal).amax() < 1e-14);
    }

    #[test]
    fn loglik_matches_uniform_case() {
        let spec = ModelSpec::new(2, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let data = crate::patterns::ObservedData::from_counts(
            2,
            DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0]),
        )
        .unwrap();
        let ll = loglik(&ParamVector::zeros(&spec), &design, &data).unwrap();
        assert!((ll - 4.0 * 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loglik_zero_counts_is_zero() {
        let spec = ModelSpec::new(2, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let data =
            crate::patterns::ObservedData::from_counts(2, DVector::zeros(4)).unwrap();
        assert_eq!(
            loglik(&ParamVector::zeros(&spec), &design, &data).unwrap(),
            0.0
        );
    }

    #[test]
    fn nan_parameter_rejected() {
        let spec = ModelSpec::new(2, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let mut theta = ParamVector::zeros(&spec);
        theta.tau[0] = f64::NAN;
        assert!(evaluate(&theta, &design).is_err());
    }
}
