//! Cross-checks of the analytic derivatives at converged fits: the
//! score/residual identities, crosstable residual symmetry, and the
//! large-sample agreement of the outer-product and expected information.

use lcadep::design::{build_design, Coding, ModelSpec, ParamVector};
use lcadep::deriv::{self, JacobianLayout};
use lcadep::epc;
use lcadep::estim::{fit, FitOptions, FitResult};
use lcadep::model::evaluate;
use lcadep::patterns::ObservedData;
use lcadep::sim;

fn study_sample(lambda: f64, psi: f64, n: usize, seed: u64) -> ObservedData {
    let (spec, theta) = sim::true_theta(lambda, psi, (1, 2)).unwrap();
    sim::draw_sample(&theta, &spec, n, seed).unwrap()
}

fn tight_fit(data: &ObservedData, spec: &ModelSpec, seed: u64) -> FitResult {
    let opts = FitOptions {
        starts: 6,
        seed,
        tol_grad: 1e-10,
        max_newton_iter: 100,
        ..FitOptions::default()
    };
    fit(data, spec, &opts).unwrap()
}

#[test]
fn score_equals_scaled_bivariate_residual_at_fit() {
    let data = study_sample(0.8, 0.3, 2048, 5150);
    for (coding, factor) in [(Coding::Effect, 4.0), (Coding::Dummy, 1.0)] {
        let spec = ModelSpec::new(5, 2, coding).unwrap();
        let fitted = tight_fit(&data, &spec, 2);
        for pair in spec.pairs() {
            let cand = epc::epc_candidate(&fitted, &data, &[pair]).unwrap();
            let r11 = epc::bvr(&fitted, &data, pair);
            assert!(
                (cand.score1[0] - factor * r11).abs() < 1e-8,
                "{coding:?} pair {pair:?}: score {} vs {} * r11 {}",
                cand.score1[0],
                factor,
                r11
            );
        }
    }
}

#[test]
fn crosstable_residuals_are_symmetric_at_fit() {
    // r00 = r11 = -r01 = -r10 at any converged local-independence fit
    let data = study_sample(0.5, 0.2, 1024, 99);
    let spec = ModelSpec::new(5, 2, Coding::Effect).unwrap();
    let fitted = tight_fit(&data, &spec, 3);
    let table = &data.table;
    for (j, k) in spec.pairs().into_iter().map(|(a, b)| (a - 1, b - 1)) {
        let mut res = [[0.0f64; 2]; 2];
        for r in 0..table.len() {
            let a = table.level(r, j) as usize;
            let b = table.level(r, k) as usize;
            res[a][b] += data.counts[r] - fitted.expected_counts[r];
        }
        assert!((res[0][0] - res[1][1]).abs() < 1e-8);
        assert!((res[0][0] + res[0][1]).abs() < 1e-8);
        assert!((res[0][0] + res[1][0]).abs() < 1e-8);
    }
}

#[test]
fn outer_product_approaches_expected_info_in_large_samples() {
    // (1/N) D -> (1/N) I_L at the true parameters as N grows
    let spec = ModelSpec::new(5, 2, Coding::Effect)
        .unwrap()
        .with_deps(&[(1, 2)])
        .unwrap();
    let design = build_design(&spec).unwrap();
    let mut theta = ParamVector::zeros(&spec);
    theta.alpha[0] = 0.2;
    for k in 0..5 {
        theta.lambda[(k, 0)] = 0.8;
    }
    theta.psi[0] = 0.2;
    let n = 100_000usize;
    let data = sim::draw_sample(&theta, &spec, n, 17).unwrap();
    let probs = evaluate(&theta, &design).unwrap();
    let layout = JacobianLayout::free_plus(&design, &[]);
    let s = deriv::jacobian(&design, &probs, &layout);
    let d = deriv::outer_product(&s, &data.counts);
    let i_l = deriv::expected_info(&s, &probs, n as f64);
    let rel = (&d - &i_l).norm() / i_l.norm();
    assert!(rel < 0.05, "relative Frobenius error {rel}");
}

#[test]
fn positive_dependence_leaves_positive_diagonal_residual() {
    let data = study_sample(0.8, 0.5, 2048, 2024);
    let spec = ModelSpec::new(5, 2, Coding::Effect).unwrap();
    let fitted = tight_fit(&data, &spec, 4);
    assert!(epc::bvr(&fitted, &data, (1, 2)) > 0.0);
}
