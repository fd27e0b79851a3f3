//! Configuration-driven front end: `run`, `verify` and `mesh-info`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_loop_from, AdaptOptions, AdaptRun, EstimatorKind, ProblemSpec, SolverKind};
use crate::error::{Error, Result};
use crate::mesh::{uniform_mesh, TriangleMesh};

#[derive(Debug, Parser)]
#[command(name = "afem", version, about = "Adaptive finite elements with additive Schwarz estimators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the adaptive loop and write CSV artifacts.
    Run(CommonArgs),
    /// Run the loop with all checks enabled and print a pass/fail table.
    Verify(CommonArgs),
    /// Print statistics of the initial mesh.
    MeshInfo(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overrides the config.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Maximum number of levels, overrides the config.
    #[arg(long)]
    pub levels_cap: Option<usize>,
}

fn d_p() -> usize {
    1
}
fn d_theta() -> f64 {
    0.5
}
fn d_max_dof() -> usize {
    5000
}
fn d_q() -> usize {
    2
}
fn d_rel_tol() -> f64 {
    1e-8
}
fn d_output() -> String {
    "afem-out".into()
}

/// Run configuration, read from a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    #[serde(default = "d_p")]
    pub p: usize,
    #[serde(default)]
    pub estimator: EstimatorKind,
    #[serde(default = "d_theta")]
    pub theta: f64,
    #[serde(default = "d_max_dof")]
    pub max_dof: usize,
    #[serde(default = "d_q")]
    pub q: usize,
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default = "d_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "d_output")]
    pub output: String,
    #[serde(default)]
    pub verify_spectral: bool,
    #[serde(default)]
    pub verify_identity: bool,
    /// ASCII mesh replacing the builtin initial mesh, relative to the config file.
    #[serde(default)]
    pub mesh: Option<String>,
    #[serde(default)]
    pub initial_level: usize,
    #[serde(default)]
    pub levels_cap: Option<usize>,
}

fn config_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    pub fn minimal(problem: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "problem": problem })).expect("defaults are complete")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err("<json>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !ProblemSpec::NAMES.contains(&self.problem.as_str()) {
            return Err(config_err("problem", format!("unknown problem {:?}, expected one of {:?}", self.problem, ProblemSpec::NAMES)));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(config_err("theta", format!("{} is outside (0, 1]", self.theta)));
        }
        if !(1..=2).contains(&self.p) {
            return Err(config_err("p", format!("{} is not 1 or 2", self.p)));
        }
        if !(1..=4).contains(&self.q) {
            return Err(config_err("q", format!("{} is outside [1, 4]", self.q)));
        }
        if !(1e-14..=1e-2).contains(&self.rel_tol) {
            return Err(config_err("rel_tol", format!("{:e} is outside [1e-14, 1e-2]", self.rel_tol)));
        }
        if self.max_dof == 0 {
            return Err(config_err("max_dof", "must be positive"));
        }
        if self.levels_cap == Some(0) {
            return Err(config_err("levels_cap", "must be positive"));
        }
        Ok(())
    }

    fn options(&self, spectral: bool, identity: bool) -> AdaptOptions {
        AdaptOptions {
            estimator: self.estimator,
            theta: self.theta,
            max_dof: self.max_dof,
            p: self.p,
            q: self.q,
            solver: self.solver,
            rel_tol: self.rel_tol,
            spectral,
            identity,
            levels_cap: self.levels_cap,
            initial_level: self.initial_level,
            ..AdaptOptions::default()
        }
    }

    fn initial_mesh(&self, problem: &ProblemSpec, base: &Path) -> Result<TriangleMesh> {
        match &self.mesh {
            Some(m) => {
                let path = base.join(m);
                let mut mesh = TriangleMesh::from_ascii(&std::fs::read_to_string(path)?)?;
                for _ in 0..self.initial_level {
                    mesh = mesh.refine_uniform()?;
                }
                Ok(mesh)
            }
            None => uniform_mesh(problem.domain, self.initial_level),
        }
    }
}

/// `--output` is taken relative to the working directory, the config's
/// `output` relative to the config file.
fn apply_overrides(cfg: &mut RunConfig, args: &CommonArgs, base: &Path) -> Result<()> {
    match &args.output {
        Some(o) => cfg.output = o.to_string_lossy().into_owned(),
        None => cfg.output = base.join(&cfg.output).to_string_lossy().into_owned(),
    }
    if args.levels_cap.is_some() {
        cfg.levels_cap = args.levels_cap;
    }
    cfg.validate()
}

/// Files written by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub trace: PathBuf,
    pub estimators: PathBuf,
    pub verification: Vec<PathBuf>,
    pub levels: usize,
}

fn execute(cfg: &RunConfig, base: &Path, spectral: bool, identity: bool) -> Result<AdaptRun> {
    let problem = ProblemSpec::builtin(&cfg.problem)?;
    let mesh = cfg.initial_mesh(&problem, base)?;
    adapt_loop_from(&problem, mesh, &cfg.options(spectral, identity))
}

/// Writes `trace.csv`, `estimators.csv` (last level) and, when spectral
/// checks ran, `verification_solver.csv` / `verification_estimator.csv`.
pub fn write_artifacts(out: &AdaptRun, dir: &Path, verification: bool) -> Result<RunArtifacts> {
    std::fs::create_dir_all(dir)?;
    let trace = dir.join("trace.csv");
    std::fs::write(&trace, out.trace.to_csv())?;
    let estimators = dir.join("estimators.csv");
    let last = out.levels.last().expect("at least one level");
    std::fs::write(&estimators, last.report.to_csv())?;
    let mut paths = Vec::new();
    if verification {
        for (name, rep) in [
            ("verification_solver.csv", &out.solver_verification),
            ("verification_estimator.csv", &out.estimator_verification),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, rep.to_csv())?;
            paths.push(path);
        }
    }
    Ok(RunArtifacts {
        trace,
        estimators,
        verification: paths,
        levels: out.trace.records.len(),
    })
}

pub fn run(cfg: &RunConfig, base: &Path) -> Result<RunArtifacts> {
    let verify = cfg.verify_spectral || cfg.verify_identity;
    let out = execute(cfg, base, verify, cfg.verify_identity)?;
    write_artifacts(&out, Path::new(&cfg.output), verify)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

fn check(name: &'static str, ok: bool, detail: String) -> CheckResult {
    CheckResult {
        name,
        status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
        detail,
    }
}

fn skipped(name: &'static str, detail: &str) -> CheckResult {
    CheckResult {
        name,
        status: CheckStatus::Skipped,
        detail: detail.into(),
    }
}

const SANDWICH_SLACK: f64 = 1e-9;
const IDENTITY_TOL: f64 = 1e-8;
const CHAIN_SLACK: f64 = 1e-10;
const EFFECTIVITY_SPREAD: f64 = 10.0;
const RATE_TOL: f64 = 0.1;

/// Evaluates the property suite on a finished run.
pub fn evaluate(run: &AdaptRun, p: usize, q: usize) -> Vec<CheckResult> {
    let recs = &run.trace.records;
    let mut out = Vec::new();

    let mut worst: Option<(usize, f64, f64, f64)> = None;
    let mut ok = true;
    let mut any = false;
    for (r, l) in recs.iter().zip(&run.levels) {
        let (Some(e), Some(lo), Some(hi)) = (r.energy_error, r.lambda_min, r.lambda_max) else { continue };
        if e == 0.0 {
            continue;
        }
        any = true;
        let ratio = l.smoother_sq / (e * e);
        if ratio < lo - SANDWICH_SLACK || ratio > hi + SANDWICH_SLACK {
            ok = false;
            worst = Some((r.level, ratio, lo, hi));
        } else if worst.is_none() {
            worst = Some((r.level, ratio, lo, hi));
        }
    }
    out.push(if any {
        let (lvl, ratio, lo, hi) = worst.expect("set when any");
        check("sandwich", ok, format!("level {lvl}: ratio {ratio:.4} in [{lo:.4}, {hi:.4}]"))
    } else {
        skipped("sandwich", "0/0: no level with a nonzero error and spectral bounds")
    });

    let ids: Vec<f64> = run
        .solver_verification
        .rows
        .iter()
        .chain(&run.estimator_verification.rows)
        .filter_map(|r| r.identity_err)
        .collect();
    out.push(if ids.is_empty() {
        skipped("identity", "no decomposition small enough for the dense oracle")
    } else {
        let m = ids.iter().copied().fold(0.0, f64::max);
        check("identity", m <= IDENTITY_TOL, format!("max relative error {m:.3e} over {} checks", ids.len()))
    });

    out.push(if q < 2 {
        skipped("lower_bound_chain", "bubble space is not nested in the q = 1 enriched space")
    } else {
        let bad = run
            .levels
            .iter()
            .filter(|l| l.report.eta_tilde_sq() > l.report.eta_enriched_sq() + CHAIN_SLACK)
            .count();
        check("lower_bound_chain", bad == 0, format!("{bad} level(s) with sum eta_tilde^2 > sum eta_q^2"))
    });

    let eff: Vec<(f64, f64)> = recs
        .iter()
        .filter_map(|r| r.energy_error.filter(|e| *e > 0.0).map(|e| (r.zeta_total / e, r.eta_tilde_total / e)))
        .collect();
    out.push(if eff.len() < 2 {
        skipped("effectivity_stability", "fewer than two levels with a nonzero error")
    } else {
        let spread = |f: &dyn Fn(&(f64, f64)) -> f64| {
            let v: Vec<f64> = eff.iter().map(f).collect();
            v.iter().copied().fold(0.0, f64::max) / v.iter().copied().fold(f64::INFINITY, f64::min)
        };
        let (sz, se) = (spread(&|x| x.0), spread(&|x| x.1));
        check(
            "effectivity_stability",
            sz <= EFFECTIVITY_SPREAD && se <= EFFECTIVITY_SPREAD,
            format!("max/min zeta {sz:.3}, eta_tilde {se:.3}"),
        )
    });

    let singular = run.trace.problem != "unit_square_manufactured";
    out.push(match run.trace.tail_rate("energy_error") {
        _ if singular && run.trace.theta >= 1.0 => skipped("rate", "uniform refinement of a singular problem has no optimal rate"),
        Ok(fit) => {
            let target = -(p as f64) / 2.0;
            check(
                "rate",
                (fit.slope - target).abs() <= RATE_TOL,
                format!("slope {:.3} vs {target:.2}", fit.slope),
            )
        }
        Err(_) => skipped("rate", "fewer than three levels with a positive error"),
    });
    out
}

/// Table with one line per check.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        let tag = match r.status {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "SKIPPED",
        };
        let _ = writeln!(s, "{:<22} {:<8} {}", r.name, tag, r.detail);
    }
    s
}

/// Runs the loop with spectral and identity checks, writes the artifacts and
/// evaluates the suite.
pub fn verify(cfg: &RunConfig, base: &Path) -> Result<Vec<CheckResult>> {
    let run = execute(cfg, base, true, true)?;
    write_artifacts(&run, Path::new(&cfg.output), true)?;
    Ok(evaluate(&run, cfg.p, cfg.q))
}

pub fn mesh_info(cfg: &RunConfig, base: &Path) -> Result<String> {
    let problem = ProblemSpec::builtin(&cfg.problem)?;
    let mesh = cfg.initial_mesh(&problem, base)?;
    let st = mesh.stats();
    Ok(format!(
        "vertices {}\ntriangles {}\nedges {}\nboundary_edges {}\nmin_angle_deg {}\nmax_overlap {}\nh_max {}\nh_min {}\n",
        mesh.num_vertices(),
        mesh.num_triangles(),
        mesh.num_edges(),
        mesh.boundary().len(),
        st.min_angle,
        st.max_overlap,
        st.h_max,
        st.h_min
    ))
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let (Command::Run(args) | Command::Verify(args) | Command::MeshInfo(args)) = &cli.command;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let result = RunConfig::load(&args.config).and_then(|mut cfg| {
        apply_overrides(&mut cfg, args, &base)?;
        match &cli.command {
            Command::Run(_) => {
                let a = run(&cfg, &base)?;
                println!("{} levels written to {}", a.levels, a.trace.display());
                Ok(0)
            }
            Command::Verify(_) => {
                let results = verify(&cfg, &base)?;
                print!("{}", format_table(&results));
                let failed: Vec<&str> = results.iter().filter(|r| r.status == CheckStatus::Fail).map(|r| r.name).collect();
                if failed.is_empty() {
                    Ok(0)
                } else {
                    eprintln!("error: failed checks: {}", failed.join(", "));
                    Ok(3)
                }
            }
            Command::MeshInfo(_) => {
                print!("{}", mesh_info(&cfg, &base)?);
                Ok(0)
            }
        }
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
