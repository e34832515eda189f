//! Model specification, design matrices, and the parameter layout.
//!
//! The linear predictor for class t over all R patterns is
//! `eta_t = X_Y tau + X_YY psi + X_Yxi_t lambda`, with the class
//! probabilities given by a softmax over `X_alpha alpha`. Item design values
//! are 0/1 under dummy coding and -1/+1 under effect coding; pairwise columns
//! are elementwise products of the item columns. For T > 2 the class factor
//! uses T-1 contrasts with class T as the reference (pinned to zero under
//! dummy coding, negatively loaded under effect coding).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LcaError, Result};
use crate::patterns::PatternTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coding {
    Effect,
    Dummy,
}

impl Coding {
    /// Design value of a 0/1 level.
    #[inline]
    pub fn code(&self, level: u8) -> f64 {
        match self {
            Coding::Effect => {
                if level == 1 {
                    1.0
                } else {
                    -1.0
                }
            }
            Coding::Dummy => level as f64,
        }
    }
}

impl std::str::FromStr for Coding {
    type Err = LcaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "effect" => Ok(Coding::Effect),
            "dummy" => Ok(Coding::Dummy),
            other => Err(LcaError::Validation(format!(
                "unknown coding `{other}` (expected effect|dummy)"
            ))),
        }
    }
}

/// Model specification: item count, class count, coding scheme, and the set
/// of freed dependence pairs. All other pairwise dependencies are held fixed
/// (zero unless set otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub items: usize,
    pub classes: usize,
    pub coding: Coding,
    /// Freed pairs, 1-based item indices, lexicographically sorted.
    pub free_deps: Vec<(usize, usize)>,
    /// Fixed values for every pair (canonical pair order); entries for freed
    /// pairs are ignored.
    pub fixed_psi: Vec<f64>,
}

impl ModelSpec {
    pub fn new(items: usize, classes: usize, coding: Coding) -> Result<Self> {
        PatternTable::new(items)?;
        if classes < 1 {
            return Err(LcaError::Bounds {
                what: "class count T",
                got: classes.to_string(),
                allowed: "T >= 1",
            });
        }
        let n_pairs = items * (items.saturating_sub(1)) / 2;
        Ok(Self {
            items,
            classes,
            coding,
            free_deps: Vec::new(),
            fixed_psi: vec![0.0; n_pairs],
        })
    }

    /// Free the given 1-based pairs.
    pub fn with_deps(mut self, deps: &[(usize, usize)]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b) in deps {
            let (j, k) = if a < b { (a, b) } else { (b, a) };
            if a == b || j < 1 || k > self.items {
                return Err(LcaError::Validation(format!(
                    "invalid dependence pair ({a}, {b}) for J={}",
                    self.items
                )));
            }
            if !seen.insert((j, k)) {
                return Err(LcaError::Validation(format!("duplicate pair ({j}, {k})")));
            }
        }
        self.free_deps = seen.into_iter().collect();
        Ok(self)
    }

    /// Fix a pair's dependence at a nonzero value (it stays out of the free set).
    pub fn with_fixed_psi(mut self, pair: (usize, usize), value: f64) -> Result<Self> {
        let idx = self.pair_index(pair)?;
        self.fixed_psi[idx] = value;
        Ok(self)
    }

    pub fn n_patterns(&self) -> usize {
        1usize << self.items
    }

    pub fn n_pairs(&self) -> usize {
        self.items * (self.items - 1) / 2
    }

    /// All pairs in canonical lexicographic order, 1-based.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_pairs());
        for j in 1..=self.items {
            for k in (j + 1)..=self.items {
                out.push((j, k));
            }
        }
        out
    }

    /// Canonical 0-based index of a 1-based pair.
    pub fn pair_index(&self, pair: (usize, usize)) -> Result<usize> {
        let (a, b) = pair;
        let (j, k) = if a < b { (a, b) } else { (b, a) };
        if j < 1 || k > self.items || j == k {
            return Err(LcaError::Validation(format!(
                "invalid pair ({a}, {b}) for J={}",
                self.items
            )));
        }
        // pairs (1,2)..(1,J),(2,3)..: offset of row j plus column distance
        let j0 = j - 1;
        Ok(j0 * self.items - j0 * (j0 + 1) / 2 + (k - j - 1))
    }

    pub fn is_free(&self, pair: (usize, usize)) -> bool {
        let (a, b) = pair;
        let p = if a < b { (a, b) } else { (b, a) };
        self.free_deps.contains(&p)
    }

    /// Number of free parameters p = (T-1) + J*T + |free_deps|.
    pub fn free_param_count(&self) -> usize {
        (self.classes - 1) + self.items * self.classes + self.free_deps.len()
    }

    /// Parameter count including every pairwise dependence.
    pub fn full_param_count(&self) -> usize {
        (self.classes - 1) + self.items * self.classes + self.n_pairs()
    }

    /// Residual degrees of freedom (R-1) - p; negative when overparameterized.
    pub fn df(&self) -> i64 {
        (self.n_patterns() as i64 - 1) - self.free_param_count() as i64
    }

    /// The necessary identifiability condition p <= R-1.
    pub fn check_param_bound(&self) -> Result<()> {
        if self.df() < 0 {
            return Err(LcaError::Validation(format!(
                "p = {} exceeds R-1 = {}",
                self.free_param_count(),
                self.n_patterns() - 1
            )));
        }
        Ok(())
    }
}

/// Partitioned parameters. `lambda` is J x (T-1) with one row per item;
/// `psi` holds every pair in canonical order, freed entries at their current
/// values and the rest at their fixed values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub alpha: DVector<f64>,
    pub tau: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub psi: DVector<f64>,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let mut p = Self {
            alpha: DVector::zeros(spec.classes - 1),
            tau: DVector::zeros(spec.items),
            lambda: DMatrix::zeros(spec.items, spec.classes - 1),
            psi: DVector::zeros(spec.n_pairs()),
        };
        p.reset_fixed_psi(spec);
        p
    }

    /// Overwrite non-free psi entries with their fixed values.
    pub fn reset_fixed_psi(&mut self, spec: &ModelSpec) {
        for (idx, pair) in spec.pairs().into_iter().enumerate() {
            if !spec.is_free(pair) {
                self.psi[idx] = spec.fixed_psi[idx];
            }
        }
    }

    /// Free subvector in canonical order (alpha, tau, lambda row-major, free psi).
    pub fn flatten_free(&self, spec: &ModelSpec) -> DVector<f64> {
        let mut v = Vec::with_capacity(spec.free_param_count());
        v.extend(self.alpha.iter());
        v.extend(self.tau.iter());
        for k in 0..self.lambda.nrows() {
            for c in 0..self.lambda.ncols() {
                v.push(self.lambda[(k, c)]);
            }
        }
        for &pair in &spec.free_deps {
            v.push(self.psi[spec.pair_index(pair).expect("valid pair")]);
        }
        DVector::from_vec(v)
    }

    /// Rebuild from a free subvector, keeping fixed psi values.
    pub fn from_free(spec: &ModelSpec, free: &DVector<f64>) -> Self {
        let mut p = Self::zeros(spec);
        p.set_free(spec, free);
        p
    }

    pub fn set_free(&mut self, spec: &ModelSpec, free: &DVector<f64>) {
        debug_assert_eq!(free.len(), spec.free_param_count());
        let t1 = spec.classes - 1;
        let mut i = 0;
        for c in 0..t1 {
            self.alpha[c] = free[i];
            i += 1;
        }
        for k in 0..spec.items {
            self.tau[k] = free[i];
            i += 1;
        }
        for k in 0..spec.items {
            for c in 0..t1 {
                self.lambda[(k, c)] = free[i];
                i += 1;
            }
        }
        for &pair in &spec.free_deps {
            self.psi[spec.pair_index(pair).expect("valid pair")] = free[i];
            i += 1;
        }
    }

    /// Largest absolute free-parameter value.
    pub fn max_abs_free(&self, spec: &ModelSpec) -> f64 {
        self.flatten_free(spec).amax()
    }
}

/// Design matrices for a model specification.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub spec: ModelSpec,
    pub table: PatternTable,
    /// R x J item main-effect columns.
    pub x_y: DMatrix<f64>,
    /// R x C(J,2) pairwise interaction columns (canonical pair order).
    pub x_yy: DMatrix<f64>,
    /// T x (T-1) class contrasts multiplying the lambda design.
    pub x_class: DMatrix<f64>,
    /// T x (T-1) class-intercept design for alpha.
    pub x_alpha: DMatrix<f64>,
}

/// Build all design matrices for a specification.
pub fn build_design(spec: &ModelSpec) -> Result<DesignMatrices> {
    let table = PatternTable::new(spec.items)?;
    let r_count = table.len();
    let j = spec.items;
    let t = spec.classes;

    let mut x_y = DMatrix::zeros(r_count, j);
    for r in 0..r_count {
        for k in 0..j {
            x_y[(r, k)] = spec.coding.code(table.level(r, k));
        }
    }

    let pairs = spec.pairs();
    let mut x_yy = DMatrix::zeros(r_count, pairs.len());
    for (idx, &(a, b)) in pairs.iter().enumerate() {
        for r in 0..r_count {
            x_yy[(r, idx)] = x_y[(r, a - 1)] * x_y[(r, b - 1)];
        }
    }

    let mut x_class = DMatrix::zeros(t, t.saturating_sub(1));
    for c in 0..t.saturating_sub(1) {
        x_class[(c, c)] = 1.0;
        if spec.coding == Coding::Effect {
            x_class[(t - 1, c)] = -1.0;
        }
    }
    let x_alpha = x_class.clone();

    Ok(DesignMatrices {
        spec: spec.clone(),
        table,
        x_y,
        x_yy,
        x_class,
        x_alpha,
    })
}

impl DesignMatrices {
    /// Class-t design matrix for the lambda block: column (k, c) is
    /// `x_y[:, k] * x_class[t, c]`, item-major.
    pub fn lambda_column(&self, t: usize, k: usize, c: usize, r: usize) -> f64 {
        self.x_y[(r, k)] * self.x_class[(t, c)]
    }

    /// Linear predictor eta_t over all patterns.
    pub fn linear_predictor(&self, theta: &ParamVector, t: usize) -> Result<DVector<f64>> {
        let tcount = self.spec.classes;
        if t >= tcount {
            return Err(LcaError::Dimension(format!(
                "class index {t} out of range for T={tcount}"
            )));
        }
        if theta.tau.len() != self.spec.items
            || theta.psi.len() != self.spec.n_pairs()
            || theta.lambda.nrows() != self.spec.items
            || theta.lambda.ncols() != tcount - 1
        {
            return Err(LcaError::Dimension("parameter/design mismatch".into()));
        }
        // per-class item loading: l_k = sum_c lambda[k,c] * x_class[t,c]
        let mut eta = &self.x_y * &theta.tau + &self.x_yy * &theta.psi;
        let loadings = &theta.lambda * self.x_class.row(t).transpose();
        eta += &self.x_y * loadings;
        Ok(eta)
    }

    /// Class log-weights a = X_alpha * alpha.
    pub fn class_logits(&self, theta: &ParamVector) -> DVector<f64> {
        &self.x_alpha * &theta.alpha
    }
}
