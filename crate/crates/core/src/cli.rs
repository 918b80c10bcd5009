//! Command-line front end: `solve`, `compare`, `convergence`, `selftest`.
//!
//! Exit codes: 0 success, 1 other solver failure, 2 no convergence,
//! 3 configuration error, 4 failed check, 5 dominance violated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{check_comparison_on, reference_oracle, BmoCheck, ComparisonReport, OracleKind, Verdict};
use crate::config::{Format, OutputSection, RunConfig};
use crate::error::{Error, Result};
use crate::model::{GeneratorSpec, GridSpec};
use crate::norms::NormReport;
use crate::paths::generate;
use crate::selftest::{run_criterion, run_selftest, CriterionResult, SelftestReport};
use crate::solver::{solve, SolveOptions, SolveOutput, StageReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NO_CONVERGENCE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;
pub const EXIT_DOMINANCE: i32 = 5;

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "QBSDE_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "qbsde", version, about = "Monte Carlo solver for quadratic-growth BSDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one configuration.
    Solve {
        #[arg(short = 'c', long = "config")]
        config: PathBuf,
        /// Output directory; overrides `output.directory`.
        #[arg(short = 'o', long = "out")]
        out: Option<PathBuf>,
    },
    /// Check that solution A dominates solution B.
    Compare {
        #[arg(short = 'a')]
        a: PathBuf,
        #[arg(short = 'b')]
        b: PathBuf,
        #[arg(short = 'o', long = "out")]
        out: Option<PathBuf>,
    },
    /// Re-solve across a refinement sweep against a closed-form reference.
    Convergence {
        #[arg(short = 'c', long = "config")]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', conflicts_with = "paths", required_unless_present = "paths")]
        steps: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        paths: Option<Vec<usize>>,
        #[arg(short = 'o', long = "out")]
        out: Option<PathBuf>,
    },
    /// Run the fixed-seed acceptance checks.
    Selftest {
        /// Directory for `selftest.json`.
        #[arg(short = 'o', long = "out")]
        out: Option<PathBuf>,
        /// Run only the listed criteria.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<u32>>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::NoConvergence { .. } => EXIT_NO_CONVERGENCE,
        Error::Config(_) | Error::InvalidGrid(_) | Error::InvalidGenerator(_) | Error::UnboundedGenerator(_) => {
            EXIT_CONFIG
        }
        Error::DominanceViolated(_) => EXIT_DOMINANCE,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Solve { config, out } => cmd_solve(&config, out.as_deref()),
        Command::Compare { a, b, out } => cmd_compare(&a, &b, out.as_deref()),
        Command::Convergence { config, steps, paths, out } => {
            let sweep = match (steps, paths) {
                (Some(s), _) => Sweep::Steps(s),
                (None, Some(p)) => Sweep::Paths(p),
                (None, None) => unreachable!("clap requires one sweep"),
            };
            cmd_convergence(&config, &sweep, out.as_deref())
        }
        Command::Selftest { out, only } => cmd_selftest(out.as_deref(), only.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Sizes the global rayon pool from [`WORKERS_ENV`] when it is set.
pub fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {raw:?}")))?;
    // A pool that already exists keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Closed-form value reported next to a solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub kind: OracleKind,
    pub y0: f64,
    pub y0_se: f64,
    pub abs_error: f64,
    /// Absent when the reference value is zero.
    pub rel_error: Option<f64>,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub grid: GridSpec,
    pub y0: f64,
    pub y0_se: f64,
    pub residual: f64,
    pub norms: NormReport,
    pub pieces: usize,
    pub total_iterations: usize,
    pub min_ess_fraction: f64,
    pub stages: Vec<StageReport>,
    pub certificate: BmoCheck,
    pub reference: Option<Reference>,
}

/// Contents of `comparison.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub grid: GridSpec,
    pub report: ComparisonReport,
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn out_dir(flag: Option<&Path>, section: &OutputSection) -> PathBuf {
    flag.map_or_else(|| section.directory.clone(), Path::to_path_buf)
}

fn summarize(gen: &GeneratorSpec, out: &SolveOutput, opts: &SolveOptions) -> Result<Summary> {
    let sol = &out.solution;
    let t = &sol.triple;
    let reference = reference_oracle(gen, &out.ensemble, &opts.basis_for(&gen.terminal))?.map(|(kind, o)| {
        let abs_error = (t.y0() - o.y0()).abs();
        let rel_error = (o.y0() != 0.0).then(|| abs_error / o.y0().abs());
        Reference { kind, y0: o.y0(), y0_se: o.y0_se, abs_error, rel_error }
    });
    Ok(Summary {
        grid: out.ensemble.grid.clone(),
        y0: t.y0(),
        y0_se: t.y0_se,
        residual: t.residual,
        norms: t.norms,
        pieces: sol.pieces(),
        total_iterations: sol.total_iterations(),
        min_ess_fraction: sol.min_ess_fraction(),
        stages: sol.stages.clone(),
        certificate: out.certificate.clone(),
        reference,
    })
}

/// Field table rows for the first `n_paths` paths, path-major.
pub fn fields_csv(out: &SolveOutput, n_paths: usize) -> String {
    let t = &out.solution.triple;
    let mut s = String::from("path_id,time_index,y,z,zeta\n");
    for p in 0..n_paths.min(t.n_paths()) {
        for i in 0..=t.n_steps() {
            let _ = writeln!(s, "{p},{i},{},{},{}", t.y.get(i, p), t.z.get(i, p), t.zeta.get(i, p));
        }
    }
    s
}

/// Whitespace-separated variant of [`fields_csv`] with one block per path.
pub fn fields_dat(out: &SolveOutput, n_paths: usize) -> String {
    let t = &out.solution.triple;
    let mut s = String::from("# path_id time y z zeta\n");
    for p in 0..n_paths.min(t.n_paths()) {
        for i in 0..=t.n_steps() {
            let time = out.ensemble.grid.time(i);
            let _ = writeln!(s, "{p} {time} {} {} {}", t.y.get(i, p), t.z.get(i, p), t.zeta.get(i, p));
        }
        s.push('\n');
    }
    s
}

fn write_solve(dir: &Path, output: &OutputSection, summary: &Summary, out: &SolveOutput) -> Result<()> {
    if output.wants(Format::Json) {
        write(dir, "summary.json", &json(summary))?;
    }
    if output.wants(Format::Csv) {
        write(dir, "fields.csv", &fields_csv(out, output.csv_paths))?;
    }
    if output.wants(Format::Dat) {
        write(dir, "fields.dat", &fields_dat(out, output.csv_paths))?;
    }
    Ok(())
}

pub fn cmd_solve(config: &Path, out: Option<&Path>) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let gen = cfg.generator()?;
    let output = solve(&gen, &cfg.grid, &cfg.solver)?;
    let summary = summarize(&gen, &output, &cfg.solver)?;
    write_solve(&out_dir(out, &cfg.output), &cfg.output, &summary, &output)?;
    println!("y0 = {} ± {}", summary.y0, summary.y0_se);
    if let Some(r) = &summary.reference {
        println!("reference ({:?}) = {} (abs. error {:.3e})", r.kind, r.y0, r.abs_error);
    }
    Ok(EXIT_OK)
}

pub fn cmd_compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<i32> {
    let (ca, cb) = (RunConfig::load(a)?, RunConfig::load(b)?);
    if ca.grid != cb.grid {
        return Err(Error::Config("compared configs must share the grid and seed".into()));
    }
    let ens = generate(&ca.grid)?;
    let (report, _, _) = check_comparison_on(&ca.generator()?, &cb.generator()?, &ens, &ca.solver)?;
    let summary = ComparisonSummary { grid: ca.grid.clone(), report };
    write(&out_dir(out, &ca.output), "comparison.json", &json(&summary))?;
    let r = &summary.report;
    println!("min_gap = {:e}, tol_mc = {:e}, verdict = {:?}", r.min_gap, r.tol_mc, r.verdict);
    Ok(if r.verdict == Verdict::Pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sweep {
    Steps(Vec<usize>),
    Paths(Vec<usize>),
}

impl Sweep {
    fn levels(&self) -> &[usize] {
        match self {
            Sweep::Steps(v) | Sweep::Paths(v) => v,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = self.levels();
        if v.is_empty() || v.contains(&0) {
            return Err(Error::Config("sweep levels must be positive".into()));
        }
        if v.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("sweep levels must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Seed of sweep level `k`: the root seed at level 0, a SplitMix64 step
/// of it afterwards.
pub fn level_seed(root: u64, level: usize) -> u64 {
    if level == 0 {
        return root;
    }
    let mut z = root.wrapping_add((level as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub level: usize,
    pub n_steps: usize,
    pub n_paths: usize,
    pub y0: f64,
    pub y0_se: f64,
    pub oracle_y0: f64,
    pub oracle_se: f64,
    pub error: f64,
    /// Combined standard error of the solve and the reference.
    pub noise: f64,
    pub runtime_s: f64,
}

/// Error must not grow by more than two noise bands over the last refinement.
pub fn sweep_passes(levels: &[LevelResult]) -> bool {
    match levels {
        [.., prev, last] => last.error <= prev.error + 2.0 * last.noise.max(prev.noise),
        _ => true,
    }
}

pub fn convergence_csv(levels: &[LevelResult]) -> String {
    let mut s = String::from("level,n_steps,n_paths,y0,y0_se,oracle_y0,oracle_se,error,noise,runtime_s\n");
    for l in levels {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{:.3}",
            l.level, l.n_steps, l.n_paths, l.y0, l.y0_se, l.oracle_y0, l.oracle_se, l.error, l.noise, l.runtime_s
        );
    }
    s
}

pub fn cmd_convergence(config: &Path, sweep: &Sweep, out: Option<&Path>) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    sweep.validate()?;
    let gen = cfg.generator()?;
    let dir = out_dir(out, &cfg.output);
    let mut levels = Vec::new();
    for (k, &v) in sweep.levels().iter().enumerate() {
        let mut grid = cfg.grid.clone();
        match sweep {
            Sweep::Steps(_) => grid.n_steps = v,
            Sweep::Paths(_) => grid.n_paths = v,
        }
        grid.seed = level_seed(cfg.grid.seed, k);
        grid.validate().map_err(|e| Error::Config(e.to_string()))?;
        let start = Instant::now();
        let output = solve(&gen, &grid, &cfg.solver)?;
        let runtime_s = start.elapsed().as_secs_f64();
        let summary = summarize(&gen, &output, &cfg.solver)?;
        let Some(r) = &summary.reference else {
            return Err(Error::Config("no closed-form reference for this generator".into()));
        };
        if sweep.levels().len() == 1 {
            write_solve(&dir, &cfg.output, &summary, &output)?;
        }
        let level = LevelResult {
            level: k,
            n_steps: grid.n_steps,
            n_paths: grid.n_paths,
            y0: summary.y0,
            y0_se: summary.y0_se,
            oracle_y0: r.y0,
            oracle_se: r.y0_se,
            error: r.abs_error,
            noise: (summary.y0_se.powi(2) + r.y0_se.powi(2)).sqrt(),
            runtime_s,
        };
        println!(
            "level {k}: steps {} paths {} error {:e} (noise {:e})",
            level.n_steps, level.n_paths, level.error, level.noise
        );
        levels.push(level);
    }
    write(&dir, "convergence.csv", &convergence_csv(&levels))?;
    Ok(if sweep_passes(&levels) { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub fn cmd_selftest(out: Option<&Path>, only: Option<&[u32]>) -> Result<i32> {
    let print = |c: &CriterionResult| {
        let line = SelftestReport { criteria: vec![c.clone()] }.lines().remove(0);
        println!("{line}");
    };
    let report = match only {
        None => run_selftest(print),
        Some(ids) => {
            let mut criteria = Vec::new();
            for &id in ids {
                let c = run_criterion(id).ok_or_else(|| Error::Config(format!("no criterion {id}")))?;
                print(&c);
                criteria.push(c);
            }
            SelftestReport { criteria }
        }
    };
    if let Some(dir) = out {
        write(dir, "selftest.json", &report.to_json())?;
    }
    Ok(if report.all_pass() { EXIT_OK } else { EXIT_CHECK_FAILED })
}
