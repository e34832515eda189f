//! Maximum-likelihood estimation: EM with Newton polishing and multi-start,
//! population (KL) fits, deviance/BIC, parametric bootstrap, Wald tests, and
//! within-class marginal log-odds.
//!
//! The M-step maximizes the expected complete-data loglinear likelihood in
//! (tau, lambda, free psi) by Newton iterations over the R*T expanded table
//! with weights n_r Pr(xi=t | y_r); class intercepts update in closed form
//! from the posterior class masses. After EM converges, Newton steps on all
//! free parameters (analytic score, observed information) tighten the
//! gradient norm.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{build_design, Coding, DesignMatrices, ModelSpec, ParamVector};
use crate::deriv::{self, JacobianLayout};
use crate::error::{LcaError, Result};
use crate::model::{self, evaluate, Probabilities};
use crate::patterns::ObservedData;

/// Options controlling the optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    /// Number of random initializations.
    pub starts: usize,
    pub seed: u64,
    /// EM stops when the relative log-likelihood change drops below this.
    pub tol_em: f64,
    pub max_em_iter: usize,
    /// Newton polish stops at this score max-norm.
    pub tol_grad: f64,
    pub max_newton_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 10,
            seed: 1,
            tol_em: 1e-8,
            max_em_iter: 1000,
            tol_grad: 1e-6,
            max_newton_iter: 50,
        }
    }
}

impl FitOptions {
    /// Tighter tolerances for population (KL) fits, where the score is on
    /// the proportion scale and diagnostics need near-exact stationarity.
    pub fn population() -> Self {
        Self {
            tol_em: 1e-10,
            tol_grad: 1e-11,
            max_newton_iter: 100,
            ..Self::default()
        }
    }
}

/// A converged (or best-effort) maximum-likelihood solution.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub theta: ParamVector,
    pub loglik: f64,
    pub n_total: f64,
    /// mu_hat_r = N Pr(Y = y_r; theta_hat).
    pub expected_counts: DVector<f64>,
    /// R x T posterior class membership per pattern.
    pub posterior: DMatrix<f64>,
    /// Full probability bundle at the solution (classes label-aligned).
    pub probs: Probabilities,
    pub converged: bool,
    pub n_iterations: usize,
    /// How many starts reached the best log-likelihood (within 1e-6).
    pub best_of_starts: usize,
    pub boundary_flag: bool,
    /// Score max-norm over free parameters at the solution.
    pub gradient_norm: f64,
    pub warnings: Vec<String>,
}

/// Deviance against the saturated multinomial.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Deviance {
    pub l2: f64,
    pub df: i64,
}

/// Engine holding the immutable per-fit workspace.
struct EmEngine<'a> {
    design: &'a DesignMatrices,
    counts: &'a DVector<f64>,
    n_total: f64,
    /// Per-class R x q' design stacks for (tau, lambda, free psi).
    class_designs: Vec<DMatrix<f64>>,
    /// Linear-predictor offset from fixed psi entries.
    offset: DVector<f64>,
    /// Free psi canonical indices, in free_deps order.
    free_psi_idx: Vec<usize>,
    n_inner: usize,
}

impl<'a> EmEngine<'a> {
    fn new(design: &'a DesignMatrices, counts: &'a DVector<f64>) -> Self {
        let spec = &design.spec;
        let r_count = design.table.len();
        let j = spec.items;
        let t1 = spec.classes - 1;
        let free_psi_idx: Vec<usize> = spec
            .free_deps
            .iter()
            .map(|&p| spec.pair_index(p).expect("valid pair"))
            .collect();
        let n_inner = j + j * t1 + free_psi_idx.len();

        let mut offset = DVector::zeros(r_count);
        for (idx, pair) in spec.pairs().into_iter().enumerate() {
            if !spec.is_free(pair) && spec.fixed_psi[idx] != 0.0 {
                for r in 0..r_count {
                    offset[r] += design.x_yy[(r, idx)] * spec.fixed_psi[idx];
                }
            }
        }

        let mut class_designs = Vec::with_capacity(spec.classes);
        for t in 0..spec.classes {
            let mut x = DMatrix::zeros(r_count, n_inner);
            for r in 0..r_count {
                for k in 0..j {
                    x[(r, k)] = design.x_y[(r, k)];
                    for c in 0..t1 {
                        x[(r, j + k * t1 + c)] = design.x_y[(r, k)] * design.x_class[(t, c)];
                    }
                }
                for (i, &pi) in free_psi_idx.iter().enumerate() {
                    x[(r, j + j * t1 + i)] = design.x_yy[(r, pi)];
                }
            }
            class_designs.push(x);
        }

        Self {
            design,
            counts,
            n_total: counts.sum(),
            class_designs,
            offset,
            free_psi_idx,
            n_inner,
        }
    }

    fn inner_beta(&self, theta: &ParamVector) -> DVector<f64> {
        let spec = &self.design.spec;
        let t1 = spec.classes - 1;
        let mut beta = DVector::zeros(self.n_inner);
        for k in 0..spec.items {
            beta[k] = theta.tau[k];
            for c in 0..t1 {
                beta[spec.items + k * t1 + c] = theta.lambda[(k, c)];
            }
        }
        for (i, &pi) in self.free_psi_idx.iter().enumerate() {
            beta[spec.items + spec.items * t1 + i] = theta.psi[pi];
        }
        beta
    }

    fn apply_beta(&self, theta: &mut ParamVector, beta: &DVector<f64>) {
        let spec = &self.design.spec;
        let t1 = spec.classes - 1;
        for k in 0..spec.items {
            theta.tau[k] = beta[k];
            for c in 0..t1 {
                theta.lambda[(k, c)] = beta[spec.items + k * t1 + c];
            }
        }
        for (i, &pi) in self.free_psi_idx.iter().enumerate() {
            theta.psi[pi] = beta[spec.items + spec.items * t1 + i];
        }
    }

    /// Expected complete-data loglinear objective for the item parameters.
    fn q_items(&self, beta: &DVector<f64>, weights: &DMatrix<f64>, masses: &[f64]) -> f64 {
        let mut q = 0.0;
        for t in 0..self.design.spec.classes {
            if masses[t] == 0.0 {
                continue;
            }
            let eta = &self.class_designs[t] * beta + &self.offset;
            let max = eta.max();
            let lse = max + eta.iter().map(|&e| (e - max).exp()).sum::<f64>().ln();
            let mut dot = 0.0;
            for r in 0..eta.len() {
                dot += weights[(r, t)] * eta[r];
            }
            q += dot - masses[t] * lse;
        }
        q
    }

    /// One EM step: E computes the posterior at `theta`, M maximizes the
    /// expected complete-data likelihood. Returns the updated parameters.
    fn em_step(&self, theta: &ParamVector) -> Result<ParamVector> {
        let spec = &self.design.spec;
        let probs = evaluate(theta, self.design)?;
        let r_count = self.design.table.len();
        let t_count = spec.classes;

        // weights n_r * Pr(xi = t | y_r) and class masses
        let mut weights = DMatrix::zeros(r_count, t_count);
        let mut masses = vec![0.0; t_count];
        for r in 0..r_count {
            let n = self.counts[r];
            if n == 0.0 {
                continue;
            }
            for t in 0..t_count {
                let w = n * probs.posterior[(r, t)];
                weights[(r, t)] = w;
                masses[t] += w;
            }
        }

        let mut next = theta.clone();

        // class intercepts: closed-form gauge of log posterior masses
        if t_count > 1 {
            let floor = 1e-12 * self.n_total.max(1.0);
            let logs: Vec<f64> = masses.iter().map(|&m| m.max(floor).ln()).collect();
            match spec.coding {
                Coding::Effect => {
                    let mean = logs.iter().sum::<f64>() / t_count as f64;
                    for c in 0..t_count - 1 {
                        next.alpha[c] = logs[c] - mean;
                    }
                }
                Coding::Dummy => {
                    for c in 0..t_count - 1 {
                        next.alpha[c] = logs[c] - logs[t_count - 1];
                    }
                }
            }
        }

        // item parameters: Newton on the weighted loglinear likelihood
        let mut beta = self.inner_beta(theta);
        let inner_tol = 1e-9 * self.n_total.max(1.0);
        let mut q_cur = self.q_items(&beta, &weights, &masses);
        for _ in 0..50 {
            let (grad, hess) = self.items_grad_hess(&beta, &weights, &masses);
            if grad.amax() < inner_tol {
                break;
            }
            let Some(step) = solve_spd(&hess, &grad) else {
                break;
            };
            // halve on objective decrease
            let mut gamma = 1.0;
            let mut accepted = false;
            for _ in 0..20 {
                let cand = &beta + gamma * &step;
                let q_new = self.q_items(&cand, &weights, &masses);
                if q_new >= q_cur - 1e-12 * (1.0 + q_cur.abs()) {
                    beta = cand;
                    q_cur = q_new;
                    accepted = true;
                    break;
                }
                gamma *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        self.apply_beta(&mut next, &beta);
        Ok(next)
    }

    fn items_grad_hess(
        &self,
        beta: &DVector<f64>,
        weights: &DMatrix<f64>,
        masses: &[f64],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let q = self.n_inner;
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        for t in 0..self.design.spec.classes {
            if masses[t] == 0.0 {
                continue;
            }
            let x = &self.class_designs[t];
            let mut eta = x * beta + &self.offset;
            let max = eta.max();
            let mut sum = 0.0;
            for e in eta.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            eta /= sum; // now the class-conditional pattern probabilities
            let u = x.transpose() * &eta; // q-vector X' c
            for r in 0..x.nrows() {
                let w = weights[(r, t)] - masses[t] * eta[r];
                for i in 0..q {
                    grad[i] += w * x[(r, i)];
                }
                let wc = masses[t] * eta[r];
                if wc != 0.0 {
                    for i in 0..q {
                        let xi = wc * x[(r, i)];
                        for k in i..q {
                            hess[(i, k)] += xi * x[(r, k)];
                        }
                    }
                }
            }
            for i in 0..q {
                for k in i..q {
                    hess[(i, k)] -= masses[t] * u[i] * u[k];
                }
            }
        }
        for i in 0..q {
            for k in 0..i {
                hess[(i, k)] = hess[(k, i)];
            }
        }
        (grad, hess)
    }

    fn loglik(&self, theta: &ParamVector) -> Result<f64> {
        model::loglik_at(theta, self.design, self.counts)
    }
}

/// Solve A x = b for symmetric positive-definite A, with an LU fallback.
fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Some(chol.solve(b));
    }
    a.clone().lu().solve(b)
}

/// One public EM step (E + M) from `theta` on `data`.
pub fn em_step(theta: &ParamVector, data: &ObservedData, spec: &ModelSpec) -> Result<ParamVector> {
    let design = build_design(spec)?;
    let engine = EmEngine::new(&design, &data.counts);
    engine.em_step(theta)
}

struct StartOutcome {
    theta: ParamVector,
    loglik: f64,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
    warnings: Vec<String>,
}

fn run_start(engine: &EmEngine, mut theta: ParamVector, opts: &FitOptions) -> Result<StartOutcome> {
    let spec = &engine.design.spec;
    let mut warnings = Vec::new();
    let mut ll = engine.loglik(&theta)?;
    let mut iterations = 0;

    for _ in 0..opts.max_em_iter {
        let next = engine.em_step(&theta)?;
        let ll_next = engine.loglik(&next)?;
        iterations += 1;
        let improved = ll_next - ll;
        theta = next;
        ll = ll_next;
        if improved.abs() < opts.tol_em * (1.0 + ll.abs()) {
            break;
        }
    }

    // Newton polish on all free parameters
    let layout = JacobianLayout::free_plus(engine.design, &[]);
    for _ in 0..opts.max_newton_iter {
        let s = deriv::score_at(engine.design, &theta, engine.counts, &layout)?;
        if s.amax() < opts.tol_grad {
            break;
        }
        let (info, _) = deriv::observed_info(engine.design, &theta, engine.counts, &layout)?;
        let Some(step) = solve_spd(&info, &s) else {
            warnings.push("singular Newton system; keeping EM solution".into());
            break;
        };
        let mut gamma = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let mut cand = theta.clone();
            let scaled = gamma * &step;
            let mut free = cand.flatten_free(spec);
            free += &scaled;
            cand.set_free(spec, &free);
            match engine.loglik(&cand) {
                Ok(ll_new) if ll_new >= ll - 1e-12 * (1.0 + ll.abs()) => {
                    theta = cand;
                    ll = ll_new;
                    accepted = true;
                    break;
                }
                _ => gamma *= 0.5,
            }
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    let s = deriv::score_at(engine.design, &theta, engine.counts, &layout)?;
    let gradient_norm = s.amax();

    Ok(StartOutcome {
        theta,
        loglik: ll,
        converged: gradient_norm < opts.tol_grad,
        iterations,
        gradient_norm,
        warnings,
    })
}

fn random_start(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> ParamVector {
    let mut theta = ParamVector::zeros(spec);
    for v in theta.alpha.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    for v in theta.tau.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    for v in theta.lambda.iter_mut() {
        *v = rng.gen_range(0.2..1.2) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    }
    theta
}

/// Reorder classes by descending class proportion and re-express the
/// parameters in the active coding's gauge.
fn align_labels(theta: &ParamVector, design: &DesignMatrices) -> Result<ParamVector> {
    let spec = &design.spec;
    let t_count = spec.classes;
    if t_count < 2 {
        return Ok(theta.clone());
    }
    let probs = evaluate(theta, design)?;
    let mut order: Vec<usize> = (0..t_count).collect();
    order.sort_by(|&a, &b| {
        probs.class_probs[b]
            .partial_cmp(&probs.class_probs[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    if order.iter().enumerate().all(|(i, &t)| i == t) {
        return Ok(theta.clone());
    }

    let mut aligned = theta.clone();
    let a = design.class_logits(theta);
    let a_perm: Vec<f64> = order.iter().map(|&t| a[t]).collect();
    match spec.coding {
        Coding::Effect => {
            for c in 0..t_count - 1 {
                aligned.alpha[c] = a_perm[c];
            }
        }
        Coding::Dummy => {
            for c in 0..t_count - 1 {
                aligned.alpha[c] = a_perm[c] - a_perm[t_count - 1];
            }
        }
    }

    // per-class item loadings V = Lambda X_class', permuted and re-gauged
    let v = &theta.lambda * design.x_class.transpose();
    for k in 0..spec.items {
        let row: Vec<f64> = order.iter().map(|&t| v[(k, t)]).collect();
        match spec.coding {
            Coding::Effect => {
                for c in 0..t_count - 1 {
                    aligned.lambda[(k, c)] = row[c];
                }
            }
            Coding::Dummy => {
                let g = row[t_count - 1];
                for c in 0..t_count - 1 {
                    aligned.lambda[(k, c)] = row[c] - g;
                }
                aligned.tau[k] = theta.tau[k] + g;
            }
        }
    }

    debug_assert!({
        let before = evaluate(theta, design)?.marginal;
        let after = evaluate(&aligned, design)?.marginal;
        (before - after).amax() < 1e-8
    });
    Ok(aligned)
}

/// Fit by multi-start EM plus Newton polish, returning the best converged
/// solution (classes ordered by descending proportion).
pub fn fit(data: &ObservedData, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    if data.table.items() != spec.items {
        return Err(LcaError::Dimension(format!(
            "data has J={} items, spec J={}",
            data.table.items(),
            spec.items
        )));
    }
    spec.check_param_bound()?;
    let design = build_design(spec)?;
    let engine = EmEngine::new(&design, &data.counts);

    let outcomes: Vec<Result<StartOutcome>> = (0..opts.starts.max(1))
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
            let start = random_start(spec, &mut rng);
            run_start(&engine, start, opts)
        })
        .collect();

    let mut best: Option<(usize, StartOutcome)> = None;
    let mut best_any: Option<(usize, StartOutcome)> = None;
    let mut lls = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome?;
        lls.push((outcome.loglik, outcome.converged));
        if outcome.converged
            && best
                .as_ref()
                .map(|(_, b)| outcome.loglik > b.loglik)
                .unwrap_or(true)
        {
            best = Some((i, outcome));
        } else if best.is_none()
            && best_any
                .as_ref()
                .map(|(_, b)| outcome.loglik > b.loglik)
                .unwrap_or(true)
        {
            best_any = Some((i, outcome));
        }
    }

    match best {
        Some((_, outcome)) => {
            let best_ll = outcome.loglik;
            let attained = lls
                .iter()
                .filter(|(ll, conv)| *conv && (best_ll - ll).abs() < 1e-6 * (1.0 + best_ll.abs()))
                .count();
            finish_fit(outcome, &design, data, attained)
        }
        None => {
            let (_, outcome) = best_any.expect("at least one start");
            let best_loglik = outcome.loglik;
            let partial = finish_fit(outcome, &design, data, 0)?;
            Err(LcaError::NonConvergence {
                starts: opts.starts,
                best_loglik,
                best: Box::new(partial),
            })
        }
    }
}

fn finish_fit(
    outcome: StartOutcome,
    design: &DesignMatrices,
    data: &ObservedData,
    best_of_starts: usize,
) -> Result<FitResult> {
    let spec = &design.spec;
    let theta = align_labels(&outcome.theta, design)?;
    let probs = evaluate(&theta, design)?;
    let expected_counts = data.n_total * &probs.marginal;
    Ok(FitResult {
        spec: spec.clone(),
        boundary_flag: model::boundary_flag(&theta, spec),
        posterior: probs.posterior.clone(),
        expected_counts,
        probs,
        theta,
        loglik: outcome.loglik,
        n_total: data.n_total,
        converged: outcome.converged,
        n_iterations: outcome.iterations,
        best_of_starts,
        gradient_norm: outcome.gradient_norm,
        warnings: outcome.warnings,
    })
}

/// Fit the model to population proportions (counts summing to 1). The
/// resulting diagnostics are asymptotic population values.
pub fn fit_population(
    true_probs: &DVector<f64>,
    spec: &ModelSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    let data = ObservedData::from_proportions(spec.items, true_probs.clone())?;
    fit(&data, spec, opts)
}

/// Deviance L^2 = 2 sum n_r log(n_r / mu_r) over observed patterns, with
/// df = (R-1) - p.
pub fn deviance(fit: &FitResult, data: &ObservedData) -> Deviance {
    let mut l2 = 0.0;
    for r in 0..data.counts.len() {
        let n = data.counts[r];
        if n > 0.0 {
            l2 += n * (n / fit.expected_counts[r]).ln();
        }
    }
    Deviance {
        l2: 2.0 * l2,
        df: fit.spec.df(),
    }
}

/// BIC = L^2 - df ln(N).
pub fn bic(fit: &FitResult, data: &ObservedData) -> f64 {
    let dev = deviance(fit, data);
    dev.l2 - dev.df as f64 * data.n_total.ln()
}

/// Result of a parametric bootstrap of the deviance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Proportion of successful replicates with L^2 at or above the observed.
    pub p: f64,
    pub exceedances: usize,
    pub replicates_used: usize,
    pub failures: usize,
    pub warnings: Vec<String>,
}

impl BootstrapResult {
    /// Display form; zero exceedances report the attainable bound.
    pub fn display_p(&self) -> String {
        if self.exceedances == 0 && self.replicates_used > 0 {
            format!("< {:.4}", 1.0 / self.replicates_used as f64)
        } else {
            format!("{:.4}", self.p)
        }
    }
}

/// Parametric bootstrap p-value for the deviance: simulate `b` datasets of
/// size N from theta_hat, refit, and count deviances at or above the
/// observed one. Replicate `i` uses seed `seed + i`.
pub fn bootstrap_pvalue(
    fit: &FitResult,
    data: &ObservedData,
    spec: &ModelSpec,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    let observed = deviance(fit, data).l2;
    let n_draw = data.n_total.round();
    if n_draw < 1.0 || (n_draw - data.n_total).abs() > 1e-6 {
        return Err(LcaError::Validation(
            "bootstrap requires an integer total count".into(),
        ));
    }
    let probs = &fit.probs.marginal;
    let refit_opts = FitOptions {
        starts: 1,
        ..FitOptions::default()
    };

    let outcomes: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 + 1));
            let counts = crate::patterns::multinomial_counts(probs, n_draw as u64, &mut rng);
            let rep = ObservedData::from_counts(spec.items, counts).ok()?;
            // warm start at the parent estimates
            let design = build_design(spec).ok()?;
            let engine = EmEngine::new(&design, &rep.counts);
            let outcome = run_start(&engine, fit.theta.clone(), &refit_opts).ok()?;
            if !outcome.converged {
                return None;
            }
            let probs_rep = evaluate(&outcome.theta, &design).ok()?;
            let mu = rep.n_total * &probs_rep.marginal;
            let mut l2 = 0.0;
            for r in 0..rep.counts.len() {
                let n = rep.counts[r];
                if n > 0.0 {
                    l2 += n * (n / mu[r]).ln();
                }
            }
            Some(2.0 * l2)
        })
        .collect();

    let used: Vec<f64> = outcomes.iter().filter_map(|o| *o).collect();
    let failures = b - used.len();
    let exceedances = used.iter().filter(|&&l2| l2 >= observed - 1e-9).count();
    let mut warnings = Vec::new();
    if failures * 10 > b {
        warnings.push(format!("{failures} of {b} bootstrap replicates failed to converge"));
    }
    Ok(BootstrapResult {
        p: if used.is_empty() {
            f64::NAN
        } else {
            exceedances as f64 / used.len() as f64
        },
        exceedances,
        replicates_used: used.len(),
        failures,
        warnings,
    })
}

/// Wald test for a freed dependence parameter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WaldResult {
    pub estimate: f64,
    pub variance: f64,
    pub wald: f64,
}

/// Wald statistic psi_hat^2 / Var(psi_hat) for a freed pair, with the
/// variance taken from the inverse expected information over the free
/// parameters at theta_hat.
pub fn wald_test(fit: &FitResult, data: &ObservedData, pair: (usize, usize)) -> Result<WaldResult> {
    if !fit.spec.is_free(pair) {
        return Err(LcaError::Validation(format!(
            "pair {pair:?} is not free in the fitted model"
        )));
    }
    let design = build_design(&fit.spec)?;
    let layout = JacobianLayout::free_plus(&design, &[]);
    let s_mat = deriv::jacobian(&design, &fit.probs, &layout);
    let info = deriv::expected_info(&s_mat, &fit.probs, data.n_total);
    let dim = info.nrows();
    let chol = Cholesky::new(info.clone()).ok_or_else(|| {
        let rank = info.clone().svd(false, false).rank(1e-10 * info.norm());
        LcaError::Singular {
            context: "expected information for Wald test",
            rank,
            dim,
        }
    })?;
    let cov = chol.inverse();
    let canon = fit.spec.pair_index(pair)?;
    let free_pos = fit
        .spec
        .free_deps
        .iter()
        .position(|&p| fit.spec.pair_index(p).unwrap() == canon)
        .expect("pair is free");
    let idx = layout.psi_offset() + free_pos;
    let estimate = fit.theta.psi[canon];
    let variance = cov[(idx, idx)];
    Ok(WaldResult {
        estimate,
        variance,
        wald: estimate * estimate / variance,
    })
}

/// Within-class marginal log-odds ratio for an item pair: collapse
/// Pr(Y | xi = t) over all other items into a 2x2 table and return
/// log[(p00 p11) / (p01 p10)]. Classes are indexed in the label-aligned
/// (descending-size) order; zero cells yield +-infinity.
pub fn marginal_log_odds(fit: &FitResult, pair: (usize, usize), class: usize) -> Result<f64> {
    if class >= fit.spec.classes {
        return Err(LcaError::Dimension(format!(
            "class {class} out of range for T={}",
            fit.spec.classes
        )));
    }
    let table = crate::patterns::PatternTable::new(fit.spec.items)?;
    let (j, k) = (pair.0 - 1, pair.1 - 1);
    if pair.0 < 1 || pair.1 > fit.spec.items || pair.0 == pair.1 {
        return Err(LcaError::Validation(format!("invalid pair {pair:?}")));
    }
    let mut cell = [[0.0f64; 2]; 2];
    for r in 0..table.len() {
        cell[table.level(r, j) as usize][table.level(r, k) as usize] += fit.probs.cond[(class, r)];
    }
    Ok((cell[0][0] * cell[1][1] / (cell[0][1] * cell[1][0])).ln())
}

/// Serializable fit document (the CLI's JSON artifact).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub spec: ModelSpec,
    pub theta: ThetaBlocks,
    pub loglik: f64,
    pub deviance: f64,
    pub df: i64,
    pub bic: f64,
    pub n_total: f64,
    pub converged: bool,
    pub n_iterations: usize,
    pub best_of_starts: usize,
    pub boundary_flag: bool,
    pub gradient_norm: f64,
    pub warnings: Vec<String>,
}

/// Parameter blocks as plain arrays; `lambda` rows are items.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaBlocks {
    pub alpha: Vec<f64>,
    pub tau: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
}

impl ThetaBlocks {
    pub fn from_theta(theta: &ParamVector) -> Self {
        Self {
            alpha: theta.alpha.iter().cloned().collect(),
            tau: theta.tau.iter().cloned().collect(),
            lambda: (0..theta.lambda.nrows())
                .map(|k| theta.lambda.row(k).iter().cloned().collect())
                .collect(),
            psi: theta.psi.iter().cloned().collect(),
        }
    }

    pub fn to_theta(&self, spec: &ModelSpec) -> Result<ParamVector> {
        let mut theta = ParamVector::zeros(spec);
        if self.alpha.len() != spec.classes - 1
            || self.tau.len() != spec.items
            || self.lambda.len() != spec.items
            || self.psi.len() != spec.n_pairs()
        {
            return Err(LcaError::Dimension("theta blocks do not match spec".into()));
        }
        theta.alpha.copy_from_slice(&self.alpha);
        theta.tau.copy_from_slice(&self.tau);
        for (k, row) in self.lambda.iter().enumerate() {
            if row.len() != spec.classes - 1 {
                return Err(LcaError::Dimension("lambda row length mismatch".into()));
            }
            for (c, &v) in row.iter().enumerate() {
                theta.lambda[(k, c)] = v;
            }
        }
        theta.psi.copy_from_slice(&self.psi);
        Ok(theta)
    }
}

impl FitDocument {
    pub fn from_fit(fit: &FitResult, data: &ObservedData) -> Self {
        let dev = deviance(fit, data);
        Self {
            spec: fit.spec.clone(),
            theta: ThetaBlocks::from_theta(&fit.theta),
            loglik: fit.loglik,
            deviance: dev.l2,
            df: dev.df,
            bic: bic(fit, data),
            n_total: fit.n_total,
            converged: fit.converged,
            n_iterations: fit.n_iterations,
            best_of_starts: fit.best_of_starts,
            boundary_flag: fit.boundary_flag,
            gradient_norm: fit.gradient_norm,
            warnings: fit.warnings.clone(),
        }
    }

    /// Rebuild a `FitResult` against `data`, verifying the stored
    /// log-likelihood is reproduced.
    pub fn to_fit_result(&self, data: &ObservedData) -> Result<FitResult> {
        let design = build_design(&self.spec)?;
        let theta = self.theta.to_theta(&self.spec)?;
        let probs = evaluate(&theta, &design)?;
        let ll = model::loglik_from_marginal(&probs.marginal, &data.counts);
        if (ll - self.loglik).abs() > 1e-6 * (1.0 + self.loglik.abs()) {
            return Err(LcaError::Validation(format!(
                "fit document does not match the data: stored loglik {}, recomputed {}",
                self.loglik, ll
            )));
        }
        Ok(FitResult {
            spec: self.spec.clone(),
            boundary_flag: self.boundary_flag,
            posterior: probs.posterior.clone(),
            expected_counts: data.n_total * &probs.marginal,
            probs,
            theta,
            loglik: self.loglik,
            n_total: data.n_total,
            converged: self.converged,
            n_iterations: self.n_iterations,
            best_of_starts: self.best_of_starts,
            gradient_norm: self.gradient_norm,
            warnings: self.warnings.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Coding;

    fn study_theta(spec: &ModelSpec, lambda: f64, psi12: f64) -> ParamVector {
        let mut theta = ParamVector::zeros(spec);
        theta.alpha[0] = 0.2;
        for k in 0..spec.items {
            theta.lambda[(k, 0)] = lambda;
        }
        if psi12 != 0.0 {
            theta.psi[spec.pair_index((1, 2)).unwrap()] = psi12;
        }
        theta
    }

    #[test]
    fn em_step_is_fixed_point_at_stationary_solution() {
        let spec = ModelSpec::new(4, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let truth = study_theta(&spec, 0.8, 0.0);
        let probs = evaluate(&truth, &design).unwrap();
        let data = ObservedData::from_proportions(4, probs.marginal.clone()).unwrap();
        // population data generated by the model: truth is stationary
        let next = em_step(&truth, &data, &spec).unwrap();
        assert!((next.flatten_free(&spec) - truth.flatten_free(&spec)).amax() < 1e-10);
    }

    #[test]
    fn em_is_monotone_from_random_start() {
        let spec = ModelSpec::new(4, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let truth = study_theta(&spec, 0.6, 0.0);
        let probs = evaluate(&truth, &design).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let counts =
            crate::patterns::multinomial_counts(&probs.marginal, 700, &mut rng);
        let data = ObservedData::from_counts(4, counts).unwrap();
        let mut theta = random_start(&spec, &mut rng);
        let engine_design = build_design(&spec).unwrap();
        let engine = EmEngine::new(&engine_design, &data.counts);
        let mut ll = engine.loglik(&theta).unwrap();
        for _ in 0..100 {
            theta = engine.em_step(&theta).unwrap();
            let ll_next = engine.loglik(&theta).unwrap();
            assert!(ll_next >= ll - 1e-12 * (1.0 + ll.abs()));
            ll = ll_next;
        }
        let _ = design;
    }

    #[test]
    fn single_class_fits_in_one_m_step() {
        let spec = ModelSpec::new(2, 1, Coding::Effect).unwrap();
        let data = ObservedData::from_counts(
            2,
            DVector::from_vec(vec![40.0, 25.0, 20.0, 15.0]),
        )
        .unwrap();
        let theta = ParamVector::zeros(&spec);
        let next = em_step(&theta, &data, &spec).unwrap();
        let design = build_design(&spec).unwrap();
        let layout = JacobianLayout::free_plus(&design, &[]);
        let s = deriv::score_at(&design, &next, &data.counts, &layout).unwrap();
        assert!(s.amax() < 1e-7, "score after one M-step: {}", s.amax());
    }

    #[test]
    fn population_fit_recovers_truth() {
        let spec = ModelSpec::new(5, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let truth = study_theta(&spec, 0.8, 0.0);
        let probs = evaluate(&truth, &design).unwrap();
        let opts = FitOptions {
            starts: 4,
            seed: 3,
            ..FitOptions::population()
        };
        let fit = fit_population(&probs.marginal, &spec, &opts).unwrap();
        assert!(fit.converged);
        let diff = (fit.theta.flatten_free(&spec) - truth.flatten_free(&spec)).amax();
        assert!(diff < 1e-6, "recovered parameters off by {diff}");
    }

    #[test]
    fn saturated_fit_has_zero_deviance() {
        // Saturated here: expected counts equal observed because the data were
        // generated from the fitted model itself at population scale.
        let spec = ModelSpec::new(3, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let truth = study_theta(&spec, 0.7, 0.0);
        let probs = evaluate(&truth, &design).unwrap();
        let opts = FitOptions {
            starts: 3,
            seed: 5,
            ..FitOptions::population()
        };
        let fit = fit_population(&probs.marginal, &spec, &opts).unwrap();
        let data = ObservedData::from_proportions(3, probs.marginal.clone()).unwrap();
        let dev = deviance(&fit, &data);
        assert!(dev.l2.abs() < 1e-8);
    }

    #[test]
    fn label_alignment_orders_classes_and_keeps_marginal() {
        let spec = ModelSpec::new(3, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let mut theta = study_theta(&spec, 0.9, 0.0);
        theta.alpha[0] = -0.4; // class 2 larger
        let before = evaluate(&theta, &design).unwrap();
        let aligned = align_labels(&theta, &design).unwrap();
        let after = evaluate(&aligned, &design).unwrap();
        assert!(after.class_probs[0] >= after.class_probs[1]);
        assert!((before.marginal - after.marginal).amax() < 1e-10);
    }

    #[test]
    fn exhausted_iteration_budget_reports_nonconvergence() {
        let spec = ModelSpec::new(4, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let truth = study_theta(&spec, 0.7, 0.0);
        let probs = evaluate(&truth, &design).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let counts = crate::patterns::multinomial_counts(&probs.marginal, 400, &mut rng);
        let data = ObservedData::from_counts(4, counts).unwrap();
        let opts = FitOptions {
            starts: 3,
            seed: 1,
            max_em_iter: 1,
            max_newton_iter: 0,
            tol_grad: 1e-12,
            ..FitOptions::default()
        };
        match fit(&data, &spec, &opts) {
            Err(LcaError::NonConvergence { starts, best, .. }) => {
                assert_eq!(starts, 3);
                assert!(!best.converged);
                assert!(best.loglik.is_finite());
            }
            other => panic!("expected nonconvergence, got {other:?}"),
        }
    }

    #[test]
    fn fit_document_round_trips() {
        let spec = ModelSpec::new(3, 2, Coding::Effect).unwrap();
        let design = build_design(&spec).unwrap();
        let truth = study_theta(&spec, 0.6, 0.0);
        let probs = evaluate(&truth, &design).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let counts = crate::patterns::multinomial_counts(&probs.marginal, 500, &mut rng);
        let data = ObservedData::from_counts(3, counts).unwrap();
        let fit = fit(&data, &spec, &FitOptions { starts: 4, seed: 2, ..Default::default() })
            .unwrap();
        let doc = FitDocument::from_fit(&fit, &data);
        let json = serde_json::to_string(&doc).unwrap();
        let parsed: FitDocument = serde_json::from_str(&json).unwrap();
        let rebuilt = parsed.to_fit_result(&data).unwrap();
        assert!((rebuilt.loglik - fit.loglik).abs() < 1e-9);
        assert!((rebuilt.theta.flatten_free(&spec) - fit.theta.flatten_free(&spec)).amax() < 1e-12);
    }
}
