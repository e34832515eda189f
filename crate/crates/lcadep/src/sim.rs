//! Population (KL) and Monte Carlo studies of the EPC diagnostics, plus the
//! conditional-probability curve data.
//!
//! The study model is a two-class, five-item, effect-coded model with zero
//! item intercepts, class logit 0.20, one shared loading per condition, and
//! a single dependence on one item pair. Population cells fit the
//! local-independence model to the dependence model's exact pattern
//! probabilities; Monte Carlo cells replicate multinomial draws.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{build_design, Coding, ModelSpec, ParamVector};
use crate::epc;
use crate::error::{LcaError, Result};
use crate::estim::{fit, fit_population, FitOptions};
use crate::model::evaluate;
use crate::patterns::{multinomial_counts, ObservedData};

/// Study grid and seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub lambda_levels: Vec<f64>,
    pub psi_levels: Vec<f64>,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    /// Pair carrying the dependence, 1-based.
    pub dependent_pair: (usize, usize),
    pub master_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            lambda_levels: vec![0.5, 0.8],
            psi_levels: vec![-0.5, -0.2, -0.05, 0.0, 0.05, 0.2, 0.5],
            sample_sizes: vec![128, 256, 512, 1024, 2048],
            replications: 400,
            dependent_pair: (1, 2),
            master_seed: 1,
        }
    }
}

impl StudyConfig {
    /// Parse a flat `key = value` file. Keys: lambda_levels, psi_levels,
    /// sample_sizes, replications, seed. Lists are comma-separated; blank
    /// lines and `#` comments are ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LcaError::Schema(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let parse_f64s = |v: &str| -> Result<Vec<f64>> {
                v.split(',')
                    .map(|s| {
                        s.trim().parse::<f64>().map_err(|_| {
                            LcaError::Schema(format!("cannot parse number `{}`", s.trim()))
                        })
                    })
                    .collect()
            };
            match key {
                "lambda_levels" => config.lambda_levels = parse_f64s(value)?,
                "psi_levels" => config.psi_levels = parse_f64s(value)?,
                "sample_sizes" => {
                    config.sample_sizes = value
                        .split(',')
                        .map(|s| {
                            s.trim().parse::<usize>().map_err(|_| {
                                LcaError::Schema(format!("cannot parse size `{}`", s.trim()))
                            })
                        })
                        .collect::<Result<_>>()?
                }
                "replications" => {
                    config.replications = value.parse().map_err(|_| {
                        LcaError::Schema(format!("cannot parse replications `{value}`"))
                    })?
                }
                "seed" => {
                    config.master_seed = value
                        .parse()
                        .map_err(|_| LcaError::Schema(format!("cannot parse seed `{value}`")))?
                }
                other => {
                    return Err(LcaError::Schema(format!("unknown config key `{other}`")));
                }
            }
        }
        Ok(config)
    }
}

/// splitmix64 step, used to derive independent replicate seeds.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for (condition, replication).
pub fn replicate_seed(master: u64, condition: usize, rep: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ condition as u64) ^ rep as u64)
}

/// Independence study spec: T=2, J=5, effect coding.
pub fn study_spec() -> ModelSpec {
    ModelSpec::new(5, 2, Coding::Effect).expect("valid study spec")
}

/// Generating parameters for one condition.
pub fn true_theta(lambda: f64, psi: f64, pair: (usize, usize)) -> Result<(ModelSpec, ParamVector)> {
    let spec = study_spec().with_deps(&[pair])?;
    let mut theta = ParamVector::zeros(&spec);
    theta.alpha[0] = 0.2;
    for k in 0..5 {
        theta.lambda[(k, 0)] = lambda;
    }
    theta.psi[spec.pair_index(pair)?] = psi;
    Ok((spec, theta))
}

/// Exact pattern probabilities of the dependence model.
pub fn true_probs(lambda: f64, psi: f64, pair: (usize, usize)) -> Result<DVector<f64>> {
    let (spec, theta) = true_theta(lambda, psi, pair)?;
    let design = build_design(&spec)?;
    Ok(evaluate(&theta, &design)?.marginal)
}

/// One population (KL) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationCell {
    pub lambda: f64,
    pub psi: f64,
    pub epc_l: f64,
    pub t_l: f64,
    pub epc_gs: f64,
    pub t_gs: f64,
    pub flagged: bool,
}

impl PopulationCell {
    /// Percent relative bias 100 (EPC - psi) / psi; undefined at psi = 0.
    pub fn rel_bias_l(&self) -> Option<f64> {
        (self.psi != 0.0).then(|| 100.0 * (self.epc_l - self.psi) / self.psi)
    }

    pub fn rel_bias_gs(&self) -> Option<f64> {
        (self.psi != 0.0).then(|| 100.0 * (self.epc_gs - self.psi) / self.psi)
    }
}

/// Fit the independence model to each condition's population proportions and
/// compute both EPCs for the dependent pair.
pub fn population_study(config: &StudyConfig) -> Result<Vec<PopulationCell>> {
    let pair = config.dependent_pair;
    let mut cells = Vec::new();
    for (li, &lambda) in config.lambda_levels.iter().enumerate() {
        for (pi, &psi) in config.psi_levels.iter().enumerate() {
            let cond_idx = li * config.psi_levels.len() + pi;
            let probs = true_probs(lambda, psi, pair)?;
            let opts = FitOptions {
                starts: 4,
                seed: replicate_seed(config.master_seed, cond_idx, 0),
                ..FitOptions::population()
            };
            match fit_population(&probs, &study_spec(), &opts) {
                Ok(fit_res) => {
                    let data = ObservedData::from_proportions(5, probs)?;
                    match epc::epc_candidate(&fit_res, &data, &[pair]) {
                        Ok(c) => cells.push(PopulationCell {
                            lambda,
                            psi,
                            epc_l: c.epc_l[0],
                            t_l: c.t_l,
                            epc_gs: c.epc_gs[0],
                            t_gs: c.t_gs,
                            flagged: false,
                        }),
                        Err(_) => cells.push(PopulationCell {
                            lambda,
                            psi,
                            epc_l: f64::NAN,
                            t_l: f64::NAN,
                            epc_gs: f64::NAN,
                            t_gs: f64::NAN,
                            flagged: true,
                        }),
                    }
                }
                Err(_) => cells.push(PopulationCell {
                    lambda,
                    psi,
                    epc_l: f64::NAN,
                    t_l: f64::NAN,
                    epc_gs: f64::NAN,
                    t_gs: f64::NAN,
                    flagged: true,
                }),
            }
        }
    }
    Ok(cells)
}

/// Multinomial sample of N observations from the generating parameters.
pub fn draw_sample(
    theta: &ParamVector,
    spec: &ModelSpec,
    n: usize,
    seed: u64,
) -> Result<ObservedData> {
    let design = build_design(spec)?;
    let probs = evaluate(theta, &design)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = multinomial_counts(&probs.marginal, n as u64, &mut rng);
    ObservedData::from_counts(spec.items, counts)
}

/// One Monte Carlo cell: median EPCs over replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloCell {
    pub lambda: f64,
    pub psi: f64,
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub median_epc_l: f64,
    pub median_epc_gs: f64,
    pub flagged: bool,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Replicate draw -> independence fit -> EPC for every condition and sample
/// size. Failed replications are dropped from the medians and counted; a
/// condition is flagged when more than 5% of its replications fail.
pub fn monte_carlo(config: &StudyConfig) -> Result<Vec<MonteCarloCell>> {
    let pair = config.dependent_pair;
    let mut cells = Vec::new();
    let mut condition = 0usize;
    for &lambda in &config.lambda_levels {
        for &psi in &config.psi_levels {
            let (gen_spec, theta) = true_theta(lambda, psi, pair)?;
            for &n in &config.sample_sizes {
                let outcomes: Vec<Option<(f64, f64)>> = (0..config.replications)
                    .into_par_iter()
                    .map(|rep| {
                        let seed = replicate_seed(config.master_seed, condition, rep);
                        let data = draw_sample(&theta, &gen_spec, n, seed).ok()?;
                        let opts = FitOptions {
                            starts: 4,
                            seed: splitmix64(seed),
                            ..FitOptions::default()
                        };
                        let fit_res = fit(&data, &study_spec(), &opts).ok()?;
                        let c = epc::epc_candidate(&fit_res, &data, &[pair]).ok()?;
                        Some((c.epc_l[0], c.epc_gs[0]))
                    })
                    .collect();
                let mut ls: Vec<f64> = outcomes.iter().filter_map(|o| o.map(|v| v.0)).collect();
                let mut gss: Vec<f64> = outcomes.iter().filter_map(|o| o.map(|v| v.1)).collect();
                let failures = config.replications - ls.len();
                cells.push(MonteCarloCell {
                    lambda,
                    psi,
                    n,
                    replications: config.replications,
                    failures,
                    median_epc_l: median(&mut ls),
                    median_epc_gs: median(&mut gss),
                    flagged: failures * 20 > config.replications,
                });
                condition += 1;
            }
        }
    }
    Ok(cells)
}

/// One point of the conditional-probability curves.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub xi: f64,
    /// Level of the conditioning item Y_j'.
    pub y_other: u8,
    /// Pr(Y_j = 1 | xi, Y_j' = y_other).
    pub prob: f64,
}

/// Conditional probability that an item equals 1 given a (continuous,
/// illustrative) latent value and the other item of the dependent pair,
/// under the effect-coded study model with zero intercepts.
pub fn curve_data(lambda: f64, psi: f64, grid: &[f64]) -> Vec<CurvePoint> {
    let mut out = Vec::with_capacity(grid.len() * 2);
    for &xi in grid {
        for y_other in [0u8, 1u8] {
            let other_code = if y_other == 1 { 1.0 } else { -1.0 };
            let logit = 2.0 * (lambda * xi + psi * other_code);
            out.push(CurvePoint {
                xi,
                y_other,
                prob: 1.0 / (1.0 + (-logit).exp()),
            });
        }
    }
    out
}

/// Full study archive for JSON output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyArchive {
    pub config: StudyConfig,
    pub population: Option<Vec<PopulationCell>>,
    pub montecarlo: Option<Vec<MonteCarloCell>>,
}

/// Write population cells as CSV (one row per condition, both statistics and
/// relative biases).
pub fn write_population_csv<W: Write>(cells: &[PopulationCell], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "lambda",
        "psi",
        "epc_l",
        "t_l",
        "rel_bias_l_pct",
        "epc_gs",
        "t_gs",
        "rel_bias_gs_pct",
        "flagged",
    ])?;
    let fmt_bias = |b: Option<f64>| b.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
    for c in cells {
        w.write_record([
            format!("{}", c.lambda),
            format!("{}", c.psi),
            format!("{:.6}", c.epc_l),
            format!("{:.6}", c.t_l),
            fmt_bias(c.rel_bias_l()),
            format!("{:.6}", c.epc_gs),
            format!("{:.6}", c.t_gs),
            fmt_bias(c.rel_bias_gs()),
            c.flagged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write Monte Carlo medians as CSV.
pub fn write_montecarlo_csv<W: Write>(cells: &[MonteCarloCell], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "lambda",
        "psi",
        "n",
        "replications",
        "failures",
        "median_epc_l",
        "median_epc_gs",
        "flagged",
    ])?;
    for c in cells {
        w.write_record([
            format!("{}", c.lambda),
            format!("{}", c.psi),
            c.n.to_string(),
            c.replications.to_string(),
            c.failures.to_string(),
            format!("{:.6}", c.median_epc_l),
            format!("{:.6}", c.median_epc_gs),
            c.flagged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write curve points for every (lambda, psi) condition as CSV.
pub fn write_curves_csv<W: Write>(
    conditions: &[(f64, f64, Vec<CurvePoint>)],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lambda", "psi", "xi", "y_other", "prob"])?;
    for (lambda, psi, points) in conditions {
        for p in points {
            w.write_record([
                format!("{lambda}"),
                format!("{psi}"),
                format!("{:.4}", p.xi),
                p.y_other.to_string(),
                format!("{:.8}", p.prob),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
