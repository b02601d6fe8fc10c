//! Command-line front end: `na1 <command> --config FILE [--out DIR] ...`.
//!
//! Exit codes: 0 success, 2 invalid input or config, 3 refused
//! precondition, 1 anything else.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use num_rational::BigRational;
use serde::Serialize;

use crate::config::{Arithmetic, ExperimentConfig, ForgeMode, Overrides};
use crate::deflator::{
    deflator_experiment, mean_se, DeflatorOptions, LocalizationRow, MartingaleTestReport, MeasureSplit,
};
use crate::error::{Error, Result};
use crate::forge::{
    kernel_direction_with_tol, ladder_experiment, scaled_drift_arbitrage, unboundedness_test, NupbrReport,
};
use crate::grid::{derive_seed, stream_rng};
use crate::model::{simulate, simulation_summary};
use crate::report::{ReportWriter, REPORT_FILE};
use crate::structure::{classify_na1, RANK_TOL};
use crate::tree::scalar::Scalar;
use crate::tree::{self, TreeModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_REFUSED: i32 = 3;

/// Paths used to decide between kernel and ladder in `forge` auto mode.
const PILOT_PATHS: usize = 200;

#[derive(Debug, Parser)]
#[command(name = "na1", version, about = "Diagnostics for no arbitrage of the first kind")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate paths and write marginal statistics.
    Simulate(RunArgs),
    /// Classify the model as NA1_OK, STRUCTURE_FAIL, MASS_DIVERGES or INCONCLUSIVE.
    CheckNa1(RunArgs),
    /// Build the deflator and test it and the deflated prices for the martingale property.
    Deflate(RunArgs),
    /// Localize the deflator at first-passage levels and split its mass.
    Localize(RunArgs),
    /// Construct arbitrage families and test boundedness in probability.
    Forge(RunArgs),
    /// Run the exact oracles on a finite tree.
    Tree(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::CheckNa1(_) => "check-na1",
            Command::Deflate(_) => "deflate",
            Command::Localize(_) => "localize",
            Command::Forge(_) => "forge",
            Command::Tree(_) => "tree",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::CheckNa1(a)
            | Command::Deflate(a)
            | Command::Localize(a)
            | Command::Forge(a)
            | Command::Tree(a) => a,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for report.json and CSV files.
    #[arg(long, default_value = "na1-out")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the number of paths.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Overrides the number of grid steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else if matches!(e, Error::Refused(_)) {
        EXIT_REFUSED
    } else {
        EXIT_OTHER
    }
}

/// Parse arguments, run, print a one-line summary or the error, and return
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("na1 {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

/// Run one command and return its summary line.
pub fn execute(command: &Command) -> Result<String> {
    let args = command.args();
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(Overrides {
        seed: args.seed,
        paths: args.paths,
        steps: args.steps,
    });
    let job = || dispatch(command.name(), &cfg, &args.out);
    match args.threads {
        None => job(),
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {t} threads: {e}")))?
            .install(job),
    }
}

fn dispatch(name: &str, cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let mut w = ReportWriter::new(out)?;
    let verdict = match name {
        "simulate" => cmd_simulate(cfg, &mut w)?,
        "check-na1" => cmd_check_na1(cfg, &mut w)?,
        "deflate" => cmd_deflate(cfg, &mut w)?,
        "localize" => cmd_localize(cfg, &mut w)?,
        "forge" => cmd_forge(cfg, &mut w)?,
        "tree" => cmd_tree(cfg, &mut w)?,
        other => return Err(Error::Config(format!("unknown command `{other}`"))),
    };
    Ok(format!("{name}: {verdict} ({})", out.join(REPORT_FILE).display()))
}

fn cmd_simulate(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<String> {
    let model = cfg.market_model()?;
    let grid = cfg.time_grid()?;
    let sum = simulation_summary(&model, &grid, cfg.paths, cfg.seed, cfg.simulate.report_points)?;
    w.report("simulate", cfg, &sum)?;
    w.csv("marginals.csv", &sum.marginals)?;
    Ok(format!("{} paths, {} excluded", sum.paths, sum.excluded))
}

fn cmd_check_na1(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<String> {
    let model = cfg.market_model()?;
    let grid = cfg.time_grid()?;
    let rep = classify_na1(&model, &grid, cfg.paths, cfg.seed, &cfg.classify.options())?;
    w.report("check-na1", cfg, &rep)?;
    w.csv("levels.csv", &rep.levels)?;
    w.csv("sharpe_quantiles.csv", &rep.sharpe_quantiles)?;
    w.csv("mass_quantiles.csv", &rep.mass_quantiles)?;
    Ok(rep.classification.to_string())
}

fn deflator_options(cfg: &ExperimentConfig) -> DeflatorOptions {
    DeflatorOptions {
        scheme: cfg.deflate.scheme,
        levels: cfg.deflate.levels.clone(),
        monitoring: cfg.deflate.monitoring,
        rank_tol: cfg.deflate.rank_tol,
    }
}

#[derive(Debug, Serialize)]
struct CheckpointRow<'a> {
    process: &'a str,
    t: f64,
    mean: f64,
    se: f64,
    pass: bool,
}

fn checkpoint_rows<'a>(process: &'a str, t: &MartingaleTestReport, out: &mut Vec<CheckpointRow<'a>>) {
    for c in &t.checkpoints {
        out.push(CheckpointRow {
            process,
            t: c.t,
            mean: c.mean,
            se: c.se,
            pass: c.pass,
        });
    }
}

fn cmd_deflate(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<String> {
    let model = cfg.market_model()?;
    let grid = cfg.time_grid()?;
    let exp = deflator_experiment(&model, &grid, cfg.paths, cfg.seed, &deflator_options(cfg))?;
    w.report("deflate", cfg, &exp)?;
    let names: Vec<String> = (0..model.dim()).map(|k| format!("Y*S{k}")).collect();
    let mut rows = Vec::new();
    checkpoint_rows("Y", &exp.deflator_test, &mut rows);
    for (name, t) in names.iter().zip(&exp.deflated_price_tests) {
        checkpoint_rows(name, t, &mut rows);
    }
    w.csv("martingale_test.csv", &rows)?;
    let status = if exp.deflator_test.strict {
        "strict local martingale"
    } else if exp.deflator_test.pass {
        "martingale"
    } else {
        "martingale test failed"
    };
    Ok(format!(
        "deflator {status}, deficit {:.4} ± {:.4}",
        exp.deflator_test.terminal_deficit, exp.deflator_test.deficit_se
    ))
}

#[derive(Debug, Serialize)]
struct LocalizeResult<'a> {
    model: &'a str,
    paths: usize,
    excluded: usize,
    levels: &'a [LocalizationRow],
    extrapolated_limit: f64,
    split: &'a MeasureSplit,
}

fn cmd_localize(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<String> {
    let model = cfg.market_model()?;
    let grid = cfg.time_grid()?;
    let exp = deflator_experiment(&model, &grid, cfg.paths, cfg.seed, &deflator_options(cfg))?;
    let loc = &exp.localization;
    let res = LocalizeResult {
        model: &exp.model,
        paths: exp.paths,
        excluded: exp.excluded,
        levels: &loc.schedule.rows,
        extrapolated_limit: loc.schedule.extrapolated_limit,
        split: &loc.split,
    };
    w.report("localize", cfg, &res)?;
    w.csv("localization.csv", &loc.schedule.rows)?;
    let kind = if loc.split.countably_additive {
        "countably additive"
    } else {
        "singular part present"
    };
    Ok(format!(
        "regular {:.4}, singular {:.4}, {kind}",
        loc.split.regular_mass, loc.split.singular_mass
    ))
}

#[derive(Debug, Serialize)]
struct KernelMemberRow {
    k: f64,
    mean: f64,
    min: f64,
    max: f64,
    variance: f64,
    min_wealth: f64,
}

#[derive(Debug, Serialize)]
struct KernelResult<'a> {
    mode: &'static str,
    model: &'a str,
    paths: usize,
    max_kernel_quad: f64,
    mean_gain: f64,
    members: Vec<KernelMemberRow>,
    nupbr: &'a NupbrReport,
}

fn cmd_forge(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<String> {
    let model = cfg.market_model()?;
    let grid = cfg.time_grid()?;
    let fc = &cfg.forge;
    let kernel = match fc.mode {
        ForgeMode::Kernel => true,
        ForgeMode::Ladder => false,
        ForgeMode::Auto => {
            let pilot = simulate(&model, &grid, cfg.paths.min(PILOT_PATHS), derive_seed(cfg.seed, 1))?;
            match kernel_direction_with_tol(&model, &pilot, RANK_TOL) {
                Ok(_) => true,
                Err(Error::Refused(_)) => false,
                Err(e) => return Err(e),
            }
        }
    };
    let nupbr = if kernel {
        let bundle = simulate(&model, &grid, cfg.paths, cfg.seed)?;
        let ks = kernel_direction_with_tol(&model, &bundle, RANK_TOL)?;
        let family = scaled_drift_arbitrage(&ks, &bundle, &fc.scales)?;
        let nupbr = unboundedness_test(&family, &fc.thresholds)?;
        let n = grid.steps();
        let gains: Vec<f64> = (0..ks.paths()).map(|p| ks.gain_path(p)[n]).collect();
        let members = family
            .index
            .iter()
            .zip(&family.terminal)
            .zip(&family.min_wealth)
            .map(|((&k, xs), &lo)| {
                let mean = mean_se(xs).0;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
                KernelMemberRow {
                    k,
                    mean,
                    min: xs.iter().copied().fold(f64::INFINITY, f64::min),
                    max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    variance: var,
                    min_wealth: lo,
                }
            })
            .collect();
        let res = KernelResult {
            mode: "kernel",
            model: model.name(),
            paths: bundle.paths(),
            max_kernel_quad: ks.max_quad,
            mean_gain: mean_se(&gains).0,
            members,
            nupbr: &nupbr,
        };
        w.report("forge", cfg, &res)?;
        w.csv("kernel_family.csv", &res.members)?;
        nupbr
    } else {
        let exp = ladder_experiment(&model, &grid, cfg.paths, cfg.seed, &fc.ks, &fc.thresholds, fc.scheme)?;
        #[derive(Serialize)]
        struct Tagged<'a, T> {
            mode: &'static str,
            #[serde(flatten)]
            inner: &'a T,
        }
        w.report(
            "forge",
            cfg,
            &Tagged {
                mode: "ladder",
                inner: &exp,
            },
        )?;
        w.csv("ladder.csv", &exp.ladder.levels)?;
        exp.nupbr
    };
    w.csv("nupbr.csv", &nupbr.rows())?;
    Ok(format!("{} via {}", nupbr.verdict, if kernel { "kernel strategy" } else { "leverage ladder" }))
}

// ---------------------------------------------------------------------------
// tree
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct NodeRow {
    id: String,
    depth: usize,
    prob: String,
    price: String,
    density: Option<String>,
    q_prob: Option<String>,
}

#[derive(Debug, Serialize)]
struct ArbitrageWitness {
    node: String,
    direction: Vec<String>,
}

#[derive(Debug, Serialize)]
struct SeparatingSummary {
    measure: &'static str,
    bound: String,
    max_gain: String,
    holds: bool,
}

#[derive(Debug, Serialize)]
struct BayesSummary {
    samples: usize,
    stopping_times: usize,
    q_martingales: usize,
    consistent: usize,
}

#[derive(Debug, Serialize)]
struct TreeAnalysis {
    arithmetic: Arithmetic,
    nodes: usize,
    depth: usize,
    dim: usize,
    feasible: bool,
    arbitrage: Option<ArbitrageWitness>,
    patching_consistent: Option<bool>,
    separating: SeparatingSummary,
    wealth_martingale: crate::tree::WealthMartingaleOutcome,
    bayes: Option<BayesSummary>,
    #[serde(skip)]
    rows: Vec<NodeRow>,
}

#[derive(Debug, Serialize)]
struct TreeResult {
    file: Option<String>,
    analysis: Option<TreeAnalysis>,
    fingerprint: Option<tree::LocalizationTable>,
}

#[derive(Debug, Serialize)]
struct FingerprintRow {
    depth: usize,
    level: f64,
    value: f64,
}

fn strings<T: Display>(xs: &[T]) -> Vec<String> {
    xs.iter().map(|x| x.to_string()).collect()
}

fn analyze_tree<T: Scalar + Display>(
    tree: &TreeModel<T>,
    arithmetic: Arithmetic,
    bound: T,
    tests: &[Vec<T>],
) -> Result<TreeAnalysis> {
    let feas = tree::deflator_feasibility(tree);
    let (y, q, arbitrage) = match feas {
        tree::Feasibility::Deflator { y, q } => (Some(y), Some(q), None),
        tree::Feasibility::Infeasible { node, certificate } => (
            None,
            None,
            Some(ArbitrageWitness {
                node: tree.node(node).label.clone(),
                direction: certificate.map(|c| strings(&c)).unwrap_or_default(),
            }),
        ),
    };
    // without a deflator, test the physical measure itself
    let (density, measure) = match &y {
        Some(y) => (y.clone(), "deflator"),
        None => (vec![T::one(); tree.len()], "physical"),
    };
    let sep = tree::separating_check(tree, &density, bound)?;
    let wealth_martingale = tree::wealth_martingale_check(tree, &density)?;
    let patching_consistent = y.as_ref().map(|y| tree::patching_consistent(tree, y)).transpose()?;
    let bayes = match &y {
        Some(y) if tree::count_stopping_times(tree) <= tree::MAX_STOPPING_TIMES && !tests.is_empty() => {
            let mut s = BayesSummary {
                samples: tests.len(),
                stopping_times: 0,
                q_martingales: 0,
                consistent: 0,
            };
            for x in tests {
                let out = tree::bayes_check(tree, y, x)?;
                s.stopping_times = out.stopping_times;
                s.q_martingales += usize::from(out.q_martingale);
                s.consistent += usize::from(out.consistent());
            }
            Some(s)
        }
        _ => None,
    };
    let rows = tree
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| NodeRow {
            id: n.label.clone(),
            depth: n.depth,
            prob: n.prob.to_string(),
            price: strings(&n.price).join(" "),
            density: y.as_ref().map(|y| y[i].to_string()),
            q_prob: q.as_ref().map(|q| q[i].to_string()),
        })
        .collect();
    Ok(TreeAnalysis {
        arithmetic,
        nodes: tree.len(),
        depth: tree.depth(),
        dim: tree.dim(),
        feasible: y.is_some(),
        arbitrage,
        patching_consistent,
        separating: SeparatingSummary {
            measure,
            bound: sep.bound.to_string(),
            max_gain: sep.max_gain.to_string(),
            holds: sep.holds,
        },
        wealth_martingale,
        bayes,
        rows,
    })
}

fn cmd_tree(cfg: &ExperimentConfig, w: &mut ReportWriter) -> Result<String> {
    let tc = &cfg.tree;
    if tc.file.is_none() && tc.depths.is_empty() {
        return Err(Error::Config("[tree] needs `file` or `depths`".into()));
    }
    if !(tc.bound.is_finite() && tc.bound >= 0.0) {
        return Err(Error::Config("[tree] bound must be finite and nonnegative".into()));
    }
    let mut summary = Vec::new();
    let mut analysis = None;
    if let Some(path) = &tc.file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read tree file {}: {e}", path.display())))?;
        let exact = tree::parse_tree(&text)?;
        // test processes: alternately martingales under the deflator measure and arbitrary ones
        let mut rng = stream_rng(derive_seed(cfg.seed, 7), 0);
        let mut tests: Vec<Vec<BigRational>> = Vec::new();
        if let tree::Feasibility::Deflator { y, .. } = tree::deflator_feasibility(&exact) {
            let qt = tree::reweight(&exact, &y)?;
            for i in 0..tc.samples {
                tests.push(if i % 2 == 0 {
                    tree::random_martingale(&qt, &mut rng)
                } else {
                    tree::random_process(&exact, &mut rng)
                });
            }
        }
        let bound = tree::scalar::parse_rational(&tc.bound.to_string())?;
        let a = match tc.arithmetic {
            Arithmetic::Exact => analyze_tree(&exact, tc.arithmetic, bound, &tests)?,
            Arithmetic::Float => {
                let tests: Vec<Vec<f64>> = tests
                    .iter()
                    .map(|x| x.iter().map(Scalar::to_f64).collect())
                    .collect();
                analyze_tree(&exact.to_f64(), tc.arithmetic, tc.bound, &tests)?
            }
        };
        w.csv("nodes.csv", &a.rows)?;
        summary.push(match &a.arbitrage {
            None => "arbitrage-free".to_string(),
            Some(arb) => format!("arbitrage at node {}", arb.node),
        });
        analysis = Some(a);
    }
    let fingerprint = if tc.depths.is_empty() {
        None
    } else {
        let t = tree::inverse_bessel_table(&tc.depths, &tc.levels, cfg.grid.horizon)?;
        let rows: Vec<FingerprintRow> = t
            .depths
            .iter()
            .zip(&t.values)
            .flat_map(|(&depth, vals)| {
                t.levels
                    .iter()
                    .zip(vals)
                    .map(move |(&level, &value)| FingerprintRow { depth, level, value })
            })
            .collect();
        w.csv("fingerprint.csv", &rows)?;
        summary.push(format!("localization table for {} depths", t.depths.len()));
        Some(t)
    };
    let res = TreeResult {
        file: tc
            .file
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|f| f.to_string_lossy().into_owned()),
        analysis,
        fingerprint,
    };
    w.report("tree", cfg, &res)?;
    Ok(summary.join(", "))
}
