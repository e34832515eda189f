//! Command-line surface: fit latent class models, scan local dependencies,
//! check identifiability, and run the study grids.
//!
//! Exit codes: 0 success, 2 usage/input error, 3 nonconvergence.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use lcadep::{
    design::Coding,
    epc,
    estim::{self, FitDocument, FitOptions},
    ident, patterns, sim, LcaError, ModelSpec, ObservedData,
};

#[derive(Parser)]
#[command(
    name = "lcadep",
    about = "Latent class models for binary data with local dependence diagnostics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a latent class model and write the result as JSON.
    Fit {
        /// CSV data file (raw 0/1 rows, or aggregated with a `count` column).
        #[arg(long)]
        data: PathBuf,
        /// Number of latent classes.
        #[arg(long)]
        classes: usize,
        /// Freed dependence pairs as 1-based column pairs, e.g. `1-3,2-5`.
        #[arg(long, default_value = "")]
        deps: String,
        /// Item coding scheme.
        #[arg(long, default_value = "effect")]
        coding: String,
        /// Number of random starts.
        #[arg(long, default_value_t = 10)]
        starts: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output path for the fit JSON.
        #[arg(long)]
        out: PathBuf,
        /// Fail unless the data total matches this count.
        #[arg(long)]
        expect_n: Option<u64>,
    },
    /// Compute EPC diagnostics for fixed dependence pairs of a fitted model.
    Epc {
        /// Fit JSON produced by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// The data the model was fitted to.
        #[arg(long)]
        data: PathBuf,
        /// Pairs to scan (default: all pairs not already free).
        #[arg(long)]
        pairs: Option<String>,
        /// Output path; `.json` writes JSON, anything else CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe local identifiability by Jacobian rank at random points.
    Ident {
        #[arg(long)]
        items: usize,
        #[arg(long)]
        classes: usize,
        /// Freed dependence pairs included in the probed model.
        #[arg(long, default_value = "")]
        deps: String,
        #[arg(long, default_value_t = 50)]
        draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the population/Monte Carlo studies or emit curve data.
    Simulate {
        /// Flat key=value config file (lambda_levels, psi_levels,
        /// sample_sizes, replications, seed).
        #[arg(long)]
        config: PathBuf,
        /// population | montecarlo | curves
        #[arg(long)]
        mode: String,
        /// Output directory for CSV tables and the JSON archive.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        let code = err
            .downcast_ref::<LcaError>()
            .map(|e| match e {
                LcaError::NonConvergence { .. } => 3,
                _ => 2,
            })
            .unwrap_or(2);
        std::process::exit(code);
    }
}

fn parse_pairs(text: &str) -> anyhow::Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for token in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (a, b) = token
            .split_once('-')
            .with_context(|| format!("pair `{token}` is not of the form j-k"))?;
        let j: usize = a.trim().parse().with_context(|| format!("bad pair `{token}`"))?;
        let k: usize = b.trim().parse().with_context(|| format!("bad pair `{token}`"))?;
        pairs.push((j, k));
    }
    Ok(pairs)
}

fn ingest_auto(path: &Path) -> anyhow::Result<ObservedData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    let mode = patterns::detect_mode(&headers);
    Ok(patterns::ingest(path, mode)?)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Fit {
            data,
            classes,
            deps,
            coding,
            starts,
            seed,
            out,
            expect_n,
        } => cmd_fit(&data, classes, &deps, &coding, starts, seed, &out, expect_n),
        Command::Epc {
            fit,
            data,
            pairs,
            out,
        } => cmd_epc(&fit, &data, pairs.as_deref(), &out),
        Command::Ident {
            items,
            classes,
            deps,
            draws,
            seed,
        } => cmd_ident(items, classes, &deps, draws, seed),
        Command::Simulate { config, mode, out } => cmd_simulate(&config, &mode, &out),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    data_path: &Path,
    classes: usize,
    deps: &str,
    coding: &str,
    starts: usize,
    seed: u64,
    out: &Path,
    expect_n: Option<u64>,
) -> anyhow::Result<()> {
    if classes < 2 {
        bail!(LcaError::Validation("--classes must be at least 2".into()));
    }
    let data = ingest_auto(data_path)?;
    if let Some(expected) = expect_n {
        if (data.n_total - expected as f64).abs() > 1e-9 {
            bail!(LcaError::Validation(format!(
                "data total N = {} does not match --expect-n {}",
                data.n_total, expected
            )));
        }
    }
    let coding: Coding = coding.parse::<Coding>().map_err(anyhow::Error::from)?;
    let spec = ModelSpec::new(data.table.items(), classes, coding)?
        .with_deps(&parse_pairs(deps)?)?;
    let opts = FitOptions {
        starts,
        seed,
        ..FitOptions::default()
    };
    let fit = estim::fit(&data, &spec, &opts)?;
    let doc = FitDocument::from_fit(&fit, &data);
    std::fs::write(out, serde_json::to_string_pretty(&doc)?)
        .with_context(|| format!("cannot write {}", out.display()))?;

    let dep_list = spec
        .free_deps
        .iter()
        .map(|(j, k)| format!("{j}-{k}"))
        .collect::<Vec<_>>()
        .join(",");
    println!(
        "N={} J={} T={} coding={:?} deps=[{}]",
        data.n_total, spec.items, spec.classes, spec.coding, dep_list
    );
    println!("loglik={:.4}", doc.loglik);
    println!("deviance={:.4} df={}", doc.deviance, doc.df);
    println!("bic={:.4}", doc.bic);
    if doc.boundary_flag {
        eprintln!("warning: boundary-divergent parameter estimates");
    }
    for w in &doc.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_epc(
    fit_path: &Path,
    data_path: &Path,
    pairs: Option<&str>,
    out: &Path,
) -> anyhow::Result<()> {
    let doc: FitDocument = serde_json::from_str(
        &std::fs::read_to_string(fit_path)
            .with_context(|| format!("cannot read {}", fit_path.display()))?,
    )
    .map_err(LcaError::from)?;
    let data = ingest_auto(data_path)?;
    let fit = doc.to_fit_result(&data)?;

    let requested = match pairs {
        Some(text) => parse_pairs(text)?,
        None => fit
            .spec
            .pairs()
            .into_iter()
            .filter(|&p| !fit.spec.is_free(p))
            .collect(),
    };
    let mut scan_list = Vec::new();
    for pair in requested {
        let canonical = {
            let (a, b) = pair;
            if a < b {
                (a, b)
            } else {
                (b, a)
            }
        };
        if fit.spec.is_free(canonical) {
            println!(
                "note: pair {}-{} is already free in the model; row omitted",
                canonical.0, canonical.1
            );
        } else {
            scan_list.push(canonical);
        }
    }
    let rows = epc::scan_pairs(&fit, &data, &scan_list);
    let is_json = out.extension().map(|e| e == "json").unwrap_or(false);
    if is_json {
        std::fs::write(out, epc::to_json(&rows)?)?;
    } else {
        let file = std::fs::File::create(out)
            .with_context(|| format!("cannot write {}", out.display()))?;
        epc::write_csv(&rows, file)?;
    }
    for row in &rows {
        if !row.flags.is_empty() {
            eprintln!(
                "pair {}-{} flagged: {}",
                row.pair.0,
                row.pair.1,
                row.flags.join("; ")
            );
        }
    }
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_ident(
    items: usize,
    classes: usize,
    deps: &str,
    draws: usize,
    seed: u64,
) -> anyhow::Result<()> {
    let dep_pairs = parse_pairs(deps)?;
    if dep_pairs.is_empty() {
        let cell = ident::table_cell(items, classes, Coding::Effect, draws, seed)?;
        if !cell.base_identified {
            println!("base model not identified (J={items}, T={classes})");
        } else {
            println!(
                "model identified; {}/{} dependencies addable",
                cell.addable.unwrap_or(0),
                cell.total_pairs
            );
        }
    } else {
        let spec = ModelSpec::new(items, classes, Coding::Effect)?.with_deps(&dep_pairs)?;
        let report = ident::rank_probe(&spec, draws, seed)?;
        let worst = report.ranks.iter().min().copied().unwrap_or(0);
        println!(
            "verdict={:?} required_rank={} worst_rank={} draws={}",
            report.verdict, report.required_rank, worst, report.n_draws
        );
    }
    Ok(())
}

fn cmd_simulate(config_path: &Path, mode: &str, out_dir: &Path) -> anyhow::Result<()> {
    let config = sim::StudyConfig::from_file(config_path)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut archive = sim::StudyArchive {
        config: config.clone(),
        population: None,
        montecarlo: None,
    };
    match mode {
        "population" => {
            let cells = sim::population_study(&config)?;
            let file = std::fs::File::create(out_dir.join("population.csv"))?;
            sim::write_population_csv(&cells, file)?;
            for c in cells.iter().filter(|c| c.flagged) {
                eprintln!("flagged condition: lambda={} psi={}", c.lambda, c.psi);
            }
            println!("wrote {} population cells", cells.len());
            archive.population = Some(cells);
        }
        "montecarlo" => {
            let cells = sim::monte_carlo(&config)?;
            let file = std::fs::File::create(out_dir.join("montecarlo.csv"))?;
            sim::write_montecarlo_csv(&cells, file)?;
            for c in cells.iter().filter(|c| c.flagged) {
                eprintln!(
                    "flagged condition: lambda={} psi={} n={} ({} failures)",
                    c.lambda, c.psi, c.n, c.failures
                );
            }
            println!("wrote {} monte carlo cells", cells.len());
            archive.montecarlo = Some(cells);
        }
        "curves" => {
            let grid: Vec<f64> = (0..=80).map(|i| -2.0 + 0.05 * i as f64).collect();
            let mut conditions = Vec::new();
            for &lambda in &config.lambda_levels {
                for &psi in &config.psi_levels {
                    conditions.push((lambda, psi, sim::curve_data(lambda, psi, &grid)));
                }
            }
            let file = std::fs::File::create(out_dir.join("curves.csv"))?;
            sim::write_curves_csv(&conditions, file)?;
            println!("wrote curves for {} conditions", conditions.len());
        }
        other => bail!(LcaError::Validation(format!(
            "unknown mode `{other}` (expected population|montecarlo|curves)"
        ))),
    }
    std::fs::write(
        out_dir.join("results.json"),
        serde_json::to_string_pretty(&archive).map_err(LcaError::from)?,
    )?;
    Ok(())
}
