//! Analytic derivatives of the pattern log-probabilities: patternwise
//! Jacobian, score vector, expected and observed information, and the
//! outer-product matrix.
//!
//! Jacobian columns are ordered (alpha, tau, lambda item-major, psi) where
//! the psi block holds only the requested pair columns, so scans evaluate
//! one candidate at a time instead of materializing all C(J,2) columns. For a
//! block with class-t design X_t the Jacobian is
//! `sum_t diag(post_t) (X_t - 1 m_t')` with `m_t = X_t' cond_t`; the alpha
//! block is `sum_t (post_t - Pr(xi=t)) x_alpha[t, c]`.

use nalgebra::{DMatrix, DVector};

use crate::design::{DesignMatrices, ParamVector};
use crate::error::Result;
use crate::model::{evaluate, Probabilities};

/// Column layout of a Jacobian with a chosen psi column subset.
#[derive(Debug, Clone)]
pub struct JacobianLayout {
    pub classes: usize,
    pub items: usize,
    /// Canonical 0-based pair indices included after (alpha, tau, lambda).
    pub psi_cols: Vec<usize>,
}

impl JacobianLayout {
    pub fn new(design: &DesignMatrices, psi_cols: Vec<usize>) -> Self {
        Self {
            classes: design.spec.classes,
            items: design.spec.items,
            psi_cols,
        }
    }

    /// All free columns of a spec plus optional extra candidate pairs.
    pub fn free_plus(design: &DesignMatrices, extra_pairs: &[usize]) -> Self {
        let mut psi_cols: Vec<usize> = design
            .spec
            .free_deps
            .iter()
            .map(|&p| design.spec.pair_index(p).expect("valid pair"))
            .collect();
        psi_cols.extend_from_slice(extra_pairs);
        Self::new(design, psi_cols)
    }

    pub fn n_alpha(&self) -> usize {
        self.classes - 1
    }

    pub fn n_lambda(&self) -> usize {
        self.items * (self.classes - 1)
    }

    pub fn n_cols(&self) -> usize {
        self.n_alpha() + self.items + self.n_lambda() + self.psi_cols.len()
    }

    pub fn psi_offset(&self) -> usize {
        self.n_alpha() + self.items + self.n_lambda()
    }

    /// Add `delta` to the parameter addressed by column `col`.
    pub fn perturb(&self, theta: &mut ParamVector, col: usize, delta: f64) {
        let na = self.n_alpha();
        let nt = self.items;
        let t1 = self.classes - 1;
        if col < na {
            theta.alpha[col] += delta;
        } else if col < na + nt {
            theta.tau[col - na] += delta;
        } else if col < na + nt + self.n_lambda() {
            let i = col - na - nt;
            theta.lambda[(i / t1, i % t1)] += delta;
        } else {
            theta.psi[self.psi_cols[col - self.psi_offset()]] += delta;
        }
    }

    /// Current value of the parameter addressed by column `col`.
    pub fn value(&self, theta: &ParamVector, col: usize) -> f64 {
        let na = self.n_alpha();
        let nt = self.items;
        let t1 = self.classes - 1;
        if col < na {
            theta.alpha[col]
        } else if col < na + nt {
            theta.tau[col - na]
        } else if col < na + nt + self.n_lambda() {
            let i = col - na - nt;
            theta.lambda[(i / t1, i % t1)]
        } else {
            theta.psi[self.psi_cols[col - self.psi_offset()]]
        }
    }
}

/// Patternwise Jacobian `S[r, i] = d log Pr(Y=y_r) / d theta_i`.
pub fn jacobian(
    design: &DesignMatrices,
    probs: &Probabilities,
    layout: &JacobianLayout,
) -> DMatrix<f64> {
    let r_count = design.table.len();
    let t_count = design.spec.classes;
    let j = design.spec.items;
    let t1 = t_count - 1;
    let na = layout.n_alpha();
    let mut s = DMatrix::zeros(r_count, layout.n_cols());

    // alpha block
    for c in 0..na {
        for r in 0..r_count {
            let mut v = 0.0;
            for t in 0..t_count {
                v += (probs.posterior[(r, t)] - probs.class_probs[t]) * design.x_alpha[(t, c)];
            }
            s[(r, c)] = v;
        }
    }

    let tau_off = na;
    let lam_off = na + j;
    let psi_off = layout.psi_offset();

    for t in 0..t_count {
        // m_tau[k] = x_y[:,k]' cond_t
        let mut m_tau = vec![0.0; j];
        for k in 0..j {
            let mut acc = 0.0;
            for r in 0..r_count {
                acc += design.x_y[(r, k)] * probs.cond[(t, r)];
            }
            m_tau[k] = acc;
        }
        let mut m_psi = vec![0.0; layout.psi_cols.len()];
        for (i, &pi) in layout.psi_cols.iter().enumerate() {
            let mut acc = 0.0;
            for r in 0..r_count {
                acc += design.x_yy[(r, pi)] * probs.cond[(t, r)];
            }
            m_psi[i] = acc;
        }
        for r in 0..r_count {
            let w = probs.posterior[(r, t)];
            for k in 0..j {
                let centered = design.x_y[(r, k)] - m_tau[k];
                s[(r, tau_off + k)] += w * centered;
                for c in 0..t1 {
                    s[(r, lam_off + k * t1 + c)] += w * design.x_class[(t, c)] * centered;
                }
            }
            for (i, &pi) in layout.psi_cols.iter().enumerate() {
                s[(r, psi_off + i)] += w * (design.x_yy[(r, pi)] - m_psi[i]);
            }
        }
    }
    s
}

/// Score vector `s = S' n`.
pub fn score(s_mat: &DMatrix<f64>, counts: &DVector<f64>) -> DVector<f64> {
    s_mat.transpose() * counts
}

/// Analytic score at `theta` for the columns of `layout`.
pub fn score_at(
    design: &DesignMatrices,
    theta: &ParamVector,
    counts: &DVector<f64>,
    layout: &JacobianLayout,
) -> Result<DVector<f64>> {
    let probs = evaluate(theta, design)?;
    Ok(score(&jacobian(design, &probs, layout), counts))
}

/// Expected information `I_L = sum_r N Pr(y_r) S_r' S_r`.
pub fn expected_info(s_mat: &DMatrix<f64>, probs: &Probabilities, n_total: f64) -> DMatrix<f64> {
    weighted_cross(s_mat, &(n_total * &probs.marginal))
}

/// Outer-product matrix `D = sum_r n_r S_r' S_r`.
pub fn outer_product(s_mat: &DMatrix<f64>, counts: &DVector<f64>) -> DMatrix<f64> {
    weighted_cross(s_mat, counts)
}

fn weighted_cross(s_mat: &DMatrix<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
    let p = s_mat.ncols();
    let mut out = DMatrix::zeros(p, p);
    for r in 0..s_mat.nrows() {
        let w = weights[r];
        if w == 0.0 {
            continue;
        }
        for i in 0..p {
            let si = w * s_mat[(r, i)];
            for k in i..p {
                out[(i, k)] += si * s_mat[(r, k)];
            }
        }
    }
    for i in 0..p {
        for k in 0..i {
            out[(i, k)] = out[(k, i)];
        }
    }
    out
}

/// Relative finite-difference step for parameter value `v`.
#[inline]
pub fn fd_step(v: f64) -> f64 {
    1e-5 * (1.0 + v.abs())
}

/// Observed information `I_Y = -ds/dtheta'` by central finite differences of
/// the analytic score, symmetrized as (A + A')/2. The boolean is a warning
/// that the raw matrix was asymmetric beyond 1e-4 of its norm.
pub fn observed_info(
    design: &DesignMatrices,
    theta: &ParamVector,
    counts: &DVector<f64>,
    layout: &JacobianLayout,
) -> Result<(DMatrix<f64>, bool)> {
    let p = layout.n_cols();
    let mut raw = DMatrix::zeros(p, p);
    for col in 0..p {
        let h = fd_step(layout.value(theta, col));
        let mut plus = theta.clone();
        layout.perturb(&mut plus, col, h);
        let mut minus = theta.clone();
        layout.perturb(&mut minus, col, -h);
        let sp = score_at(design, &plus, counts, layout)?;
        let sm = score_at(design, &minus, counts, layout)?;
        let col_vals = (sm - sp) / (2.0 * h);
        raw.column_mut(col).copy_from(&col_vals);
    }
    let sym = (&raw + raw.transpose()) * 0.5;
    let asym = (&raw - raw.transpose()).norm();
    let warn = asym > 1e-4 * raw.norm().max(f64::MIN_POSITIVE);
    Ok((sym, warn))
}
