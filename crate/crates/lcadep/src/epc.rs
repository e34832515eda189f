//! Expected parameter change diagnostics for fixed dependence parameters:
//! EPC_L with the efficient score test, EPC_GS with the generalized score
//! test, raw bivariate residuals, and the all-pairs scan.
//!
//! For a candidate block theta_1 (fixed psi entries) and free block theta_2,
//! both statistics are Schur-complement forms evaluated at the restricted
//! fit: `V_L = I_L11 - I_L12 I_L22^-1 I_L21` with `EPC_L = V_L^-1 s_1`, and
//! `V_GS = D11 - A D12' - D12 A' + A D22 A'` with `A = I_Y12 I_Y22^-1`,
//! `EPC_GS = V_GS^-1 s_1`. The score statistics are `s_1' V^-1 s_1`, chi
//! square with rank(S_1) degrees of freedom under the null.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::build_design;
use crate::deriv::{self, JacobianLayout};
use crate::error::{LcaError, Result};
use crate::estim::FitResult;
use crate::patterns::ObservedData;

/// Condition-number limit beyond which V is treated as singular.
const COND_LIMIT: f64 = 1e12;

/// Diagnostics for one candidate dependence set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpcCandidate {
    /// Candidate pairs, 1-based.
    pub pairs: Vec<(usize, usize)>,
    /// Estimated values the parameters would take if freed (fixed + change).
    pub epc_l: Vec<f64>,
    pub t_l: f64,
    pub p_l: f64,
    pub epc_gs: Vec<f64>,
    pub t_gs: f64,
    pub p_gs: f64,
    /// Degrees of freedom: numerical rank of the candidate Jacobian block.
    pub df: usize,
    pub score1: Vec<f64>,
}

/// One row of the all-pairs scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpcReport {
    pub pair: (usize, usize),
    pub epc_l: f64,
    pub t_l: f64,
    pub p_l: f64,
    pub epc_gs: f64,
    pub t_gs: f64,
    pub p_gs: f64,
    pub bvr: f64,
    pub df: usize,
    pub flags: Vec<String>,
}

fn chi2_sf(x: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    if x <= 0.0 {
        return 1.0;
    }
    statrs::function::gamma::gamma_ur(df as f64 / 2.0, x / 2.0)
}

fn split_blocks(m: &DMatrix<f64>, q_free: usize, k: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    // layout columns: [free (q_free) | candidate (k)]
    let i22 = m.view((0, 0), (q_free, q_free)).into_owned();
    let i12 = m.view((q_free, 0), (k, q_free)).into_owned();
    let i11 = m.view((q_free, q_free), (k, k)).into_owned();
    (i11, i12, i22)
}

fn invert_checked(v: &DMatrix<f64>, context: (usize, usize)) -> Result<DMatrix<f64>> {
    let svd = v.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin > COND_LIMIT {
        return Err(LcaError::Identifiability {
            pair: context,
            reason: format!(
                "candidate variance matrix near-singular (condition number {:.2e})",
                if smin > 0.0 { smax / smin } else { f64::INFINITY }
            ),
        });
    }
    v.clone()
        .try_inverse()
        .ok_or_else(|| LcaError::Identifiability {
            pair: context,
            reason: "candidate variance matrix not invertible".into(),
        })
}

/// Full candidate computation shared by `epc_l`, `epc_gs`, and `scan`.
pub fn epc_candidate(
    fit: &FitResult,
    data: &ObservedData,
    pairs: &[(usize, usize)],
) -> Result<EpcCandidate> {
    let spec = &fit.spec;
    for &pair in pairs {
        if spec.is_free(pair) {
            return Err(LcaError::Validation(format!(
                "pair {pair:?} is already free in the fitted model"
            )));
        }
    }
    let design = build_design(spec)?;
    let cand_idx: Vec<usize> = pairs
        .iter()
        .map(|&p| spec.pair_index(p))
        .collect::<Result<_>>()?;
    let layout = JacobianLayout::free_plus(&design, &cand_idx);
    let q_free = spec.free_param_count();
    let k = pairs.len();
    let tag = pairs.first().copied().unwrap_or((0, 0));

    let s_mat = deriv::jacobian(&design, &fit.probs, &layout);
    let s = deriv::score(&s_mat, &data.counts);
    let s1 = s.rows(q_free, k).into_owned();

    // degrees of freedom: rank of the candidate Jacobian block
    let s1_block = s_mat.columns(q_free, k).into_owned();
    let svd = s1_block.svd(false, false);
    let smax = svd.singular_values.max();
    let df = svd
        .singular_values
        .iter()
        .filter(|&&v| v > 1e-10 * smax)
        .count();

    // expected-information route
    let i_l = deriv::expected_info(&s_mat, &fit.probs, data.n_total);
    let (l11, l12, l22) = split_blocks(&i_l, q_free, k);
    let l22_chol = nalgebra::Cholesky::new(l22.clone()).ok_or(LcaError::Singular {
        context: "free-parameter expected information",
        rank: l22.clone().svd(false, false).rank(1e-10 * l22.norm()),
        dim: q_free,
    })?;
    let v_l = &l11 - &l12 * l22_chol.solve(&l12.transpose());
    let v_l_inv = invert_checked(&v_l, tag)?;
    let epc_l_change = &v_l_inv * &s1;
    let t_l = (s1.transpose() * &epc_l_change)[(0, 0)];

    // observed-information + outer-product route
    let (i_y, _) = deriv::observed_info(&design, &fit.theta, &data.counts, &layout)?;
    let d_mat = deriv::outer_product(&s_mat, &data.counts);
    let (d11, d12, d22) = split_blocks(&d_mat, q_free, k);
    let (_, y12, y22) = split_blocks(&i_y, q_free, k);
    let y22_inv = y22.clone().try_inverse().ok_or(LcaError::Singular {
        context: "free-parameter observed information (EPC_L remains available)",
        rank: y22.clone().svd(false, false).rank(1e-10 * y22.norm()),
        dim: q_free,
    })?;
    let a = &y12 * &y22_inv;
    let v_gs = &d11 - &a * d12.transpose() - &d12 * a.transpose() + &a * &d22 * a.transpose();
    let v_gs_inv = invert_checked(&v_gs, tag)?;
    let epc_gs_change = &v_gs_inv * &s1;
    let t_gs = (s1.transpose() * &epc_gs_change)[(0, 0)];

    // reported EPCs are the values the parameters would take if freed
    let fixed: Vec<f64> = cand_idx.iter().map(|&i| spec.fixed_psi[i]).collect();
    let epc_l: Vec<f64> = fixed
        .iter()
        .zip(epc_l_change.iter())
        .map(|(f, c)| f + c)
        .collect();
    let epc_gs: Vec<f64> = fixed
        .iter()
        .zip(epc_gs_change.iter())
        .map(|(f, c)| f + c)
        .collect();

    Ok(EpcCandidate {
        pairs: pairs.to_vec(),
        epc_l,
        t_l,
        p_l: chi2_sf(t_l, df),
        epc_gs,
        t_gs,
        p_gs: chi2_sf(t_gs, df),
        df,
        score1: s1.iter().cloned().collect(),
    })
}

/// EPC_L and the efficient score test for one candidate pair.
pub fn epc_l(fit: &FitResult, data: &ObservedData, pair: (usize, usize)) -> Result<(f64, f64)> {
    let c = epc_candidate(fit, data, &[pair])?;
    Ok((c.epc_l[0], c.t_l))
}

/// EPC_GS and the generalized score test for one candidate pair.
pub fn epc_gs(fit: &FitResult, data: &ObservedData, pair: (usize, usize)) -> Result<(f64, f64)> {
    let c = epc_candidate(fit, data, &[pair])?;
    Ok((c.epc_gs[0], c.t_gs))
}

/// Raw bivariate residual r11 = n11 - mu11 in the (1,1) cell of the pair's
/// marginal crosstable.
pub fn bvr(fit: &FitResult, data: &ObservedData, pair: (usize, usize)) -> f64 {
    let (j, k) = (pair.0 - 1, pair.1 - 1);
    let table = &data.table;
    let mut mu11 = 0.0;
    for r in 0..table.len() {
        if table.level(r, j) == 1 && table.level(r, k) == 1 {
            mu11 += fit.expected_counts[r];
        }
    }
    data.pair_count_11(pair) - mu11
}

/// Scan every requested candidate pair (single-parameter candidates); pairs
/// already free are skipped by the caller. Per-pair failures land in the
/// row's flags and the scan continues.
pub fn scan_pairs(
    fit: &FitResult,
    data: &ObservedData,
    pairs: &[(usize, usize)],
) -> Vec<EpcReport> {
    // Theorem 1 fast path: one extra class-independent psi is identifiable
    // only with positive residual degrees of freedom.
    let df_ok = fit.spec.df() > 0;
    pairs
        .par_iter()
        .map(|&pair| {
            let bvr_val = bvr(fit, data, pair);
            if !df_ok {
                return EpcReport {
                    pair,
                    epc_l: f64::NAN,
                    t_l: f64::NAN,
                    p_l: f64::NAN,
                    epc_gs: f64::NAN,
                    t_gs: f64::NAN,
                    p_gs: f64::NAN,
                    bvr: bvr_val,
                    df: 0,
                    flags: vec!["not-identifiable: no residual degrees of freedom".into()],
                };
            }
            match epc_candidate(fit, data, &[pair]) {
                Ok(c) => EpcReport {
                    pair,
                    epc_l: c.epc_l[0],
                    t_l: c.t_l,
                    p_l: c.p_l,
                    epc_gs: c.epc_gs[0],
                    t_gs: c.t_gs,
                    p_gs: c.p_gs,
                    bvr: bvr_val,
                    df: c.df,
                    flags: Vec::new(),
                },
                Err(err) => EpcReport {
                    pair,
                    epc_l: f64::NAN,
                    t_l: f64::NAN,
                    p_l: f64::NAN,
                    epc_gs: f64::NAN,
                    t_gs: f64::NAN,
                    p_gs: f64::NAN,
                    bvr: bvr_val,
                    df: 0,
                    flags: vec![err.to_string()],
                },
            }
        })
        .collect()
}

/// Scan all pairs not already free, in lexicographic order.
pub fn scan(fit: &FitResult, data: &ObservedData) -> Vec<EpcReport> {
    let pairs: Vec<(usize, usize)> = fit
        .spec
        .pairs()
        .into_iter()
        .filter(|&p| !fit.spec.is_free(p))
        .collect();
    scan_pairs(fit, data, &pairs)
}

/// Write scan rows as CSV with the canonical column set.
pub fn write_csv<W: std::io::Write>(rows: &[EpcReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "pair", "epc_l", "t_l", "p_l", "epc_gs", "t_gs", "p_gs", "bvr", "df", "flags",
    ])?;
    for row in rows {
        w.write_record([
            format!("{}-{}", row.pair.0, row.pair.1),
            format!("{:.6}", row.epc_l),
            format!("{:.6}", row.t_l),
            format!("{:.6}", row.p_l),
            format!("{:.6}", row.epc_gs),
            format!("{:.6}", row.t_gs),
            format!("{:.6}", row.p_gs),
            format!("{:.6}", row.bvr),
            row.df.to_string(),
            row.flags.join("; "),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Serialize scan rows to a JSON array.
pub fn to_json(rows: &[EpcReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)?)
}
