//! Command-line orchestration: `run`, `compare`, `diag` and `presets`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{ExperimentConfig, SamplerSpec};
use crate::diagnostics::{
    check_sufficient_decrease, dual_increments, estimate_mixture_smoothness, lagrangian_consistency, rate_estimate,
    residual_series, robbins_siegmund, DecreaseSummary, RateEstimate, TheoryConstants, Verdict,
};
use crate::error::{Error, Result};
use crate::guidance::GuidanceModel;
use crate::numeric::Vector;
use crate::plot::{line_chart, Series};
use crate::sampler::{run_admm, run_dps, run_unconditional, RunReport, SamplerConfig, SamplerKind};
use crate::schedule::ScheduleSpec;
use crate::scores::{Prior, ScoreModel};
use crate::tasks::{fit_gaussian, preset, preset_names, psnr, wasserstein2_gaussian, OracleResult, Task, TaskSpec};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "guided-admm", version, about = "Guided diffusion sampling by inexact ADMM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every sampler in a config and write report.json, steps.csv, samples.csv.
    Run(RunArgs),
    /// Run at least two samplers and tabulate oracle metrics in compare.csv.
    Compare(RunArgs),
    /// Check convergence diagnostics on saved reports.
    Diag(DiagArgs),
    /// List shipped task presets.
    Presets,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output root; overrides the config's `out_dir`.
    #[arg(long, env = "GUIDED_ADMM_OUT")]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub plots: bool,
}

#[derive(Debug, clap::Args)]
pub struct DiagArgs {
    /// Report directories or report.json files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long, env = "GUIDED_ADMM_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub plots: bool,
    /// Exit with status 3 when an applicable check fails.
    #[arg(long)]
    pub strict: bool,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    ChainsFailed,
    ChecksFailed,
}

pub fn exit_code_for(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::ChainsFailed) => EXIT_RUNTIME,
        Ok(Outcome::ChecksFailed) => EXIT_CHECK,
        Err(Error::Config(_) | Error::Json(_)) => EXIT_CONFIG,
        Err(_) => EXIT_RUNTIME,
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    let result = dispatch(&cli.command);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code_for(&result))
}

pub fn dispatch(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Diag(a) => cmd_diag(a),
        Command::Presets => {
            for name in preset_names() {
                let spec = preset(name)?;
                println!("{name}\tdim={}\toracle={:?}", spec.dim, spec.oracle);
            }
            Ok(Outcome::Ok)
        }
    }
}

/// Runs one sampler on a task.
pub fn run_sampler(
    task: &Task,
    schedule: &ScheduleSpec,
    kind: SamplerKind,
    cfg: &SamplerConfig,
    zeta: f64,
) -> Result<RunReport> {
    let s = schedule.build()?;
    let m: &dyn ScoreModel = task.prior.as_model();
    let g: &dyn GuidanceModel = task.guidance.as_model();
    match kind {
        SamplerKind::Admm => run_admm(&s, m, g, cfg),
        SamplerKind::Unconditional => run_unconditional(&s, m, cfg),
        SamplerKind::Dps => run_dps(&s, m, g, zeta, cfg),
    }
}

struct Loaded {
    cfg: ExperimentConfig,
    task: Task,
    out: PathBuf,
}

fn load(args: &RunArgs) -> Result<Loaded> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let base = args.config.parent().map(Path::to_path_buf);
    let task = cfg.build_task(base.as_deref())?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Loaded { cfg, task, out })
}

fn run_one(l: &Loaded, spec: &SamplerSpec, schedule: &ScheduleSpec) -> Result<RunReport> {
    let sampler_cfg = l.cfg.sampler_config(spec, &l.task.spec);
    let zeta = l.cfg.zeta_for(spec, &l.task.spec);
    let mut report = run_sampler(&l.task, schedule, spec.kind, &sampler_cfg, zeta)?;
    report.label = spec.label();
    report.meta.insert("task".into(), serde_json::to_value(&l.task.spec)?);
    report.meta.insert("task_hash".into(), l.task.content_hash().into());
    report.meta.insert("experiment".into(), serde_json::to_value(&l.cfg)?);
    Ok(report)
}

/// Runs every sampler (and every grid point) and writes the artifacts.
fn run_all(l: &Loaded) -> Result<(Vec<RunReport>, bool)> {
    let base = l.cfg.schedule_for(&l.task.spec)?;
    let mut reports = Vec::new();
    let mut any_failed = false;
    for spec in &l.cfg.samplers {
        let dir = l.out.join(spec.label());
        if l.cfg.t_grid.is_empty() {
            let r = run_one(l, spec, &base)?;
            r.write_dir(&dir)?;
            any_failed |= r.failed_chains > 0;
            reports.push(r);
        } else {
            for &steps in &l.cfg.t_grid {
                let r = run_one(l, spec, &base.with_steps(steps)?)?;
                r.write_dir(&dir.join(format!("T{steps}")))?;
                any_failed |= r.failed_chains > 0;
                reports.push(r);
            }
        }
    }
    Ok((reports, any_failed))
}

pub fn cmd_run(args: &RunArgs) -> Result<Outcome> {
    let l = load(args)?;
    let (reports, failed) = run_all(&l)?;
    for r in &reports {
        println!(
            "{}\tT={}\tchains={}\tfailed={}\t{:.2}s",
            r.label,
            r.steps(),
            r.chains.len(),
            r.failed_chains,
            r.wall_clock_secs
        );
    }
    if args.plots {
        write_plots(&reports, &l.out)?;
    }
    Ok(if failed { Outcome::ChainsFailed } else { Outcome::Ok })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub sampler: SamplerKind,
    pub chains: usize,
    pub failed_chains: usize,
    pub posterior_mean_error: Option<f64>,
    pub w2: Option<f64>,
    pub psnr: f64,
    pub final_primal_residual: f64,
}

/// Oracle metrics of a report. Without an oracle the posterior columns are `None`.
pub fn compare_row(report: &RunReport, task: &Task, oracle: Option<&OracleResult>) -> Result<CompareRow> {
    let xs = report.final_x();
    let zs = report.final_z();
    let nan = f64::NAN;
    let (mean, cov) = if xs.is_empty() {
        (Vector::from_element(task.dim(), nan), None)
    } else {
        let (m, c) = fit_gaussian(&xs)?;
        (m, Some(c))
    };
    let (pme, w2) = match (oracle, &cov) {
        (Some(o), Some(c)) => {
            let om = o.mean_vec();
            (
                Some((&mean - &om).norm()),
                Some(wasserstein2_gaussian(&mean, c, &om, &o.cov_mat())?),
            )
        }
        (Some(_), None) => (Some(nan), Some(nan)),
        _ => (None, None),
    };
    let residual = if xs.is_empty() {
        nan
    } else {
        xs.iter().zip(&zs).map(|(x, z)| (x - z).norm()).sum::<f64>() / xs.len() as f64
    };
    Ok(CompareRow {
        label: report.label.clone(),
        sampler: report.sampler,
        chains: report.chains.len(),
        failed_chains: report.failed_chains,
        posterior_mean_error: pme,
        w2,
        psnr: psnr(&mean, &task.truth, task.spec.peak)?,
        final_primal_residual: residual,
    })
}

pub fn write_compare_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "label",
        "sampler",
        "chains",
        "failed_chains",
        "posterior_mean_error",
        "w2",
        "psnr",
        "final_primal_residual",
    ])?;
    let opt = |v: Option<f64>| v.map_or_else(|| "unavailable".to_string(), |v| v.to_string());
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.sampler.name().to_string(),
            r.chains.to_string(),
            r.failed_chains.to_string(),
            opt(r.posterior_mean_error),
            opt(r.w2),
            r.psnr.to_string(),
            r.final_primal_residual.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_compare(args: &RunArgs) -> Result<Outcome> {
    let l = load(args)?;
    if l.cfg.samplers.len() < 2 {
        return Err(Error::Config("compare needs at least two samplers".into()));
    }
    let oracle = match l.task.oracle_cached(&l.out.join("cache")) {
        Ok(o) => o.map(|c| c.result),
        Err(e) => {
            eprintln!("warning: oracle unavailable: {e}");
            None
        }
    };
    if oracle.is_none() {
        eprintln!(
            "warning: task `{}` has no oracle; posterior columns marked unavailable",
            l.task.spec.name
        );
    }
    let (reports, failed) = run_all(&l)?;
    let rows = reports
        .iter()
        .map(|r| compare_row(r, &l.task, oracle.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    write_compare_csv(&rows, &l.out.join("compare.csv"))?;
    for r in &rows {
        println!(
            "{}\tmean_err={:?}\tw2={:?}\tpsnr={:.3}\tresidual={:.3e}",
            r.label, r.posterior_mean_error, r.w2, r.psnr, r.final_primal_residual
        );
    }
    if args.plots {
        write_plots(&reports, &l.out)?;
    }
    Ok(if failed { Outcome::ChainsFailed } else { Outcome::Ok })
}

#[derive(Debug, Serialize)]
struct ReportDiagnostics {
    path: String,
    label: String,
    steps: usize,
    failed_chains: usize,
    final_primal_residual: Option<f64>,
    final_dual_residual: Option<f64>,
    dual_identity_max_rel_error: Option<f64>,
    lagrangian_consistency: Option<f64>,
    smoothness: Option<f64>,
    sufficient_decrease: Option<DecreaseSummary>,
    robbins_siegmund_holds: bool,
    notes: Vec<String>,
}

#[derive(Debug, Serialize)]
struct RateSection {
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimate: Option<RateEstimate>,
}

#[derive(Debug, Serialize)]
struct DiagnosticsFile {
    reports: Vec<ReportDiagnostics>,
    rate: RateSection,
    x0_tilde_reading: &'static str,
}

fn task_of(report: &RunReport) -> Option<Task> {
    let spec: TaskSpec = serde_json::from_value(report.meta.get("task")?.clone()).ok()?;
    Task::build(&spec, None).ok()
}

/// Smoothness bound of the whole objective: the larger of the prior and guidance bounds.
pub fn objective_smoothness(task: &Task) -> Option<f64> {
    let prior = match &task.prior {
        Prior::Mixture(m) => Some(
            m.smoothness_bound()
                .unwrap_or_else(|| estimate_mixture_smoothness(m, 1000, 0)),
        ),
        p => p.smoothness_bound(),
    }?;
    let guidance = task.guidance.smoothness_bound()?;
    Some(prior.max(guidance))
}

fn diagnose(path: &Path, report: &RunReport) -> Result<(ReportDiagnostics, bool)> {
    let mut notes = Vec::new();
    let mut ok = true;
    let (primal, dual) = residual_series(report, 0);
    let mut out = ReportDiagnostics {
        path: path.display().to_string(),
        label: report.label.clone(),
        steps: report.steps(),
        failed_chains: report.failed_chains,
        final_primal_residual: primal.last().copied(),
        final_dual_residual: dual.last().copied(),
        dual_identity_max_rel_error: None,
        lagrangian_consistency: None,
        smoothness: None,
        sufficient_decrease: None,
        robbins_siegmund_holds: robbins_siegmund(&report.step_summary.iter().map(|s| s.movement).collect::<Vec<_>>())
            .holds,
        notes: Vec::new(),
    };
    if report.sampler == SamplerKind::Admm {
        if let Some(trace) = report.traces.iter().find(|t| t.chain == 0) {
            let inc = dual_increments(trace);
            let worst = inc
                .iter()
                .zip(&primal)
                .zip(report.chain_rows(0))
                .map(|((d, p), r)| (d - r.rho * p).abs() / (r.rho * p).max(1e-300))
                .fold(0.0, f64::max);
            out.dual_identity_max_rel_error = Some(worst);
        }
    }
    match task_of(report) {
        Some(task) => {
            if report.sampler == SamplerKind::Admm {
                let m = task.prior.as_model();
                let g = task.guidance.as_model();
                match lagrangian_consistency(report, m, g, 0) {
                    Ok(v) => {
                        ok &= v <= 1e-10;
                        out.lagrangian_consistency = Some(v);
                    }
                    Err(e) => notes.push(format!("lagrangian consistency skipped: {e}")),
                }
                if let Some(l) = objective_smoothness(&task) {
                    out.smoothness = Some(l);
                    let consts = TheoryConstants::new(l, report.config.rho, task.dim())?;
                    let d = check_sufficient_decrease(report, &consts, 0);
                    if d.applicable && d.violations > 0 {
                        notes.push(format!("{} sufficient-decrease violations", d.violations));
                    }
                    out.sufficient_decrease = Some(d);
                } else {
                    notes.push("smoothness bound unknown; decrease check skipped".into());
                }
            }
        }
        None => notes.push("report carries no task spec; model-based checks skipped".into()),
    }
    ok &= out.robbins_siegmund_holds;
    out.notes = notes;
    Ok((out, ok))
}

fn same_task(a: &RunReport, b: &RunReport) -> bool {
    let mut ca = a.config.clone();
    let mut cb = b.config.clone();
    ca.seed = 0;
    cb.seed = 0;
    a.meta.get("task_hash") == b.meta.get("task_hash") && a.sampler == b.sampler && ca == cb
}

pub fn cmd_diag(args: &DiagArgs) -> Result<Outcome> {
    let mut reports = Vec::new();
    for p in &args.reports {
        reports.push((p.clone(), RunReport::load(p)?));
    }
    let mut all_ok = true;
    let mut per = Vec::new();
    for (p, r) in &reports {
        let (d, ok) = diagnose(p, r)?;
        all_ok &= ok;
        per.push(d);
    }
    let runs: Vec<RunReport> = reports.iter().map(|(_, r)| r.clone()).collect();
    let rate = if runs.len() < 3 {
        RateSection {
            status: "insufficient points".into(),
            estimate: None,
        }
    } else if !runs.windows(2).all(|w| same_task(&w[0], &w[1])) {
        eprintln!("warning: reports differ in task or config; rate estimation skipped");
        RateSection {
            status: "skipped: mismatched reports".into(),
            estimate: None,
        }
    } else {
        match rate_estimate(&runs) {
            Ok(e) => {
                all_ok &= e.verdict == Verdict::Pass;
                RateSection {
                    status: "ok".into(),
                    estimate: Some(e),
                }
            }
            Err(e) => RateSection {
                status: format!("failed: {e}"),
                estimate: None,
            },
        }
    };
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let file = DiagnosticsFile {
        reports: per,
        rate,
        x0_tilde_reading: "x0 in the per-step inexactness term is the Tweedie estimate at the prox input",
    };
    let path = out.join("diagnostics.json");
    fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))?;
    if args.plots {
        write_plots(&runs, &out)?;
    }
    println!("wrote {}", path.display());
    Ok(if args.strict && !all_ok {
        Outcome::ChecksFailed
    } else {
        Outcome::Ok
    })
}

/// `residuals.svg` (chain 0 primal and dual residuals) and `lagrangian.svg`
/// (chain-mean Lagrangian), one series per report.
pub fn write_plots(reports: &[RunReport], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = reports.iter().map(|r| format!("{} T={}", r.label, r.steps())).collect();
    let mut res = Vec::new();
    let mut lag = Vec::new();
    for (r, name) in reports.iter().zip(&names) {
        let rows = r.chain_rows(0);
        res.push(Series {
            name: name.as_str(),
            points: rows.iter().map(|row| (row.t as f64, row.primal_res)).collect(),
        });
        if r.sampler == SamplerKind::Admm {
            res.push(Series {
                name: "dual",
                points: rows.iter().map(|row| (row.t as f64, row.dual_res)).collect(),
            });
        }
        lag.push(Series {
            name: name.as_str(),
            points: r.step_summary.iter().map(|s| (s.t as f64, s.aug_lagrangian)).collect(),
        });
    }
    let svg = line_chart("Residuals (chain 0)", "t", "residual", &res, true);
    let p = dir.join("residuals.svg");
    fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
    let svg = line_chart("Augmented Lagrangian (chain mean)", "t", "L_rho", &lag, false);
    let p = dir.join("lagrangian.svg");
    fs::write(&p, svg).map_err(|e| Error::io(&p, e))
}
