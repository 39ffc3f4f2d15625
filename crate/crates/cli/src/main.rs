//! `edgeflow`: validate workflow bundles, serve a tier, run scenarios and
//! render reports.
//!
//! Exit codes: 0 ok, 1 validation errors, 2 usage or configuration errors,
//! 3 failures above the run's failure budget.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use edgeflow_core::clock::{RealClock, SharedClock};
use edgeflow_core::gateway::{serve, GatewayState, HttpInvoker};
use edgeflow_core::graph::{build_graph, load_templates, MANIFEST_FILE};
use edgeflow_core::metrics::{fmt_num, ReportFormat, RunReport, SpanKind};
use edgeflow_core::scheduler::{build_runtime, load_scenario, run_real, run_sim, RunOutcome, Scenario};
use edgeflow_core::workloads::{standard_handlers, IotParams, VideoParams};

const EXIT_VALIDATION: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BUDGET: u8 = 3;

#[derive(Parser)]
#[command(
    name = "edgeflow",
    version,
    about = "Workflow benchmark harness for IoT, edge and cloud tiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a bundle directory (or a directory of bundles).
    Validate { dir: PathBuf },
    /// Serve one tier's gateway until killed.
    Serve {
        #[arg(long)]
        tier: String,
        #[arg(long)]
        listen: SocketAddr,
        /// Bundle directories; defaults to the scenario's `workflow_dir`.
        #[arg(long)]
        workflow: Vec<PathBuf>,
        /// Scenario file supplying topology, placement, storage and seed.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a scenario and write its report(s).
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run N times with seeds seed, seed+1, ...; reports are indexed.
        #[arg(long, default_value_t = 1)]
        repeats: u32,
        /// Drive the gateways named by `tier.<name>.url` instead of simulating.
        #[arg(long)]
        real: bool,
        /// Largest tolerated fraction of failed requests.
        #[arg(long)]
        failure_budget: Option<f64>,
    },
    /// Render a run directory's report.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Second run directory; prints per-stage deltas against DIR.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { dir } => validate(&dir),
        Command::Serve {
            tier,
            listen,
            workflow,
            config,
        } => serve_tier(&tier, listen, workflow, &config),
        Command::Run {
            scenario,
            out,
            seed,
            repeats,
            real,
            failure_budget,
        } => run(&scenario, &out, seed, repeats, real, failure_budget),
        Command::Report { dir, format, compare } => report(&dir, format, compare.as_deref()),
    };
    ExitCode::from(code)
}

fn config_error(msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    EXIT_CONFIG
}

/// Bundles under `dir`: the directory itself if it has a manifest,
/// otherwise its immediate subdirectories that do.
fn bundle_dirs(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn validate(dir: &Path) -> u8 {
    if !dir.is_dir() {
        return config_error(format!("{} is not a directory", dir.display()));
    }
    let bundles = match bundle_dirs(dir) {
        Ok(b) if !b.is_empty() => b,
        Ok(_) => {
            println!("{}: error: no `{MANIFEST_FILE}` found", dir.display());
            return EXIT_VALIDATION;
        }
        Err(e) => return config_error(e),
    };
    let (handlers, _) =
        standard_handlers(VideoParams::default(), IotParams::default()).expect("built-in handlers are distinct");
    let (mut errors, mut warnings) = (0, 0);
    for bundle in bundles {
        let (name, templates) = match load_templates(&bundle) {
            Ok(v) => v,
            Err(errs) => {
                for e in errs {
                    println!("error: {e}");
                    errors += 1;
                }
                continue;
            }
        };
        for (path, t) in &templates {
            if !handlers.contains(&t.handler) {
                println!("error: {}: unknown handler `{}`", path.display(), t.handler);
                errors += 1;
            }
        }
        match build_graph(&name, templates.into_iter().map(|(_, t)| t).collect()) {
            Ok(g) => {
                for w in g.validate_storage_chain() {
                    println!("warning: {}: {w}", bundle.display());
                    warnings += 1;
                }
                println!(
                    "{}: workflow `{name}` ({:?}, entry `{}`)",
                    bundle.display(),
                    g.kind().logic,
                    g.entry()
                );
            }
            Err(e) => {
                println!("error: {}: {e}", bundle.display());
                errors += 1;
            }
        }
    }
    println!("{errors} error(s), {warnings} warning(s)");
    if errors > 0 {
        EXIT_VALIDATION
    } else {
        0
    }
}

fn load(path: &Path) -> Result<Scenario, u8> {
    load_scenario(path).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn serve_tier(tier: &str, listen: SocketAddr, workflow: Vec<PathBuf>, config: &Path) -> u8 {
    let mut s = match load(config) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if !workflow.is_empty() {
        s.workflow_dirs = workflow;
    }
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return config_error(e),
    };
    rt.block_on(async {
        let clock: SharedClock = Arc::new(RealClock::new());
        let (runtime, _) = match build_runtime(&s, clock, false) {
            Ok(v) => v,
            Err(e) => return config_error(e),
        };
        if !runtime.topology().contains(tier) {
            return config_error(format!("tier `{tier}` is not configured"));
        }
        runtime.start_autoscaler();
        let invoker = HttpInvoker::new(runtime.clone(), Some(tier));
        let handle = match serve(listen, GatewayState::new(runtime, invoker)).await {
            Ok(h) => h,
            Err(e) => return config_error(e),
        };
        println!("tier {tier} listening on http://{}", handle.addr());
        match handle.wait().await {
            Ok(()) => 0,
            Err(e) => config_error(e),
        }
    })
}

fn report_name(ext: &str, index: Option<u32>) -> String {
    match index {
        Some(i) => format!("report_{i}.{ext}"),
        None => format!("report.{ext}"),
    }
}

fn run(path: &Path, out: &Path, seed: Option<u64>, repeats: u32, real: bool, failure_budget: Option<f64>) -> u8 {
    let mut s = match load(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if repeats == 0 {
        return config_error("--repeats must be at least 1");
    }
    if let Some(b) = failure_budget {
        if !(0.0..=1.0).contains(&b) {
            return config_error("--failure-budget must be a fraction in [0, 1]");
        }
    }
    if let Err(e) = fs::create_dir_all(out) {
        return config_error(format!("{}: {e}", out.display()));
    }
    let base_seed = seed.unwrap_or(s.seed);
    let tokio_rt = if real {
        match tokio::runtime::Runtime::new() {
            Ok(rt) => Some(rt),
            Err(e) => return config_error(e),
        }
    } else {
        None
    };
    let mut worst = 0.0f64;
    for i in 0..repeats {
        s.seed = base_seed + u64::from(i);
        s.echo.insert("seed".into(), s.seed.to_string());
        let result = match &tokio_rt {
            Some(rt) => rt.block_on(run_real(&s)),
            None => run_sim(&s),
        };
        let outcome: RunOutcome = match result {
            Ok(o) => o,
            Err(e) => return config_error(e),
        };
        let index = (repeats > 1).then_some(i + 1);
        for (fmt, ext) in [(ReportFormat::Json, "json"), (ReportFormat::Csv, "csv")] {
            let file = out.join(report_name(ext, index));
            if let Err(e) = fs::write(&file, outcome.report.render(fmt)) {
                return config_error(format!("{}: {e}", file.display()));
            }
        }
        let w = &outcome.report.workflow;
        let failed = outcome.load.failed;
        let issued = outcome.load.issued.len().max(1) as f64;
        worst = worst.max(failed as f64 / issued);
        println!(
            "run {} seed {}: {} requests, {} complete, {} failed, p95 end-to-end {} ms",
            i + 1,
            s.seed,
            w.requests,
            w.complete,
            failed,
            fmt_num(w.p95_end_to_end_ms)
        );
    }
    match failure_budget {
        Some(b) if worst > b => {
            eprintln!("failure rate {worst:.4} exceeds budget {b}");
            EXIT_BUDGET
        }
        _ => 0,
    }
}

fn read_report(dir: &Path) -> Result<(RunReport, PathBuf), u8> {
    let path = [dir.join("report.json"), dir.join("report_1.json")]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| config_error(format!("{}: no report found", dir.display())))?;
    let text = fs::read_to_string(&path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let report = serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    Ok((report, path))
}

fn table(r: &RunReport) -> String {
    let mut out = format!(
        "scenario {} (time scale {})\n{:<20} {:<8} {:>8} {:>8} {:>12} {:>12}\n",
        r.scenario.name, r.time_scale, "function", "tier", "count", "failed", "mean_ms", "p95_ms"
    );
    for f in r.functions.iter().filter(|f| f.kind == SpanKind::Handler) {
        out += &format!(
            "{:<20} {:<8} {:>8} {:>8} {:>12} {:>12}\n",
            f.name,
            f.tier,
            f.count,
            f.failures,
            fmt_num(f.mean_ms),
            fmt_num(f.p95_ms)
        );
    }
    let w = &r.workflow;
    out += &format!(
        "{:<20} {:<8} {:>8} {:>8} {:>12} {:>12}\n",
        "end_to_end",
        "",
        w.complete,
        w.requests - w.complete,
        fmt_num(r.mean_end_to_end_ms()),
        fmt_num(w.p95_end_to_end_ms)
    );
    out
}

fn delta(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(a), Some(b)) if a != 0.0 => format!("{:+.1}%", (b - a) / a * 100.0),
        _ => "n/a".into(),
    }
}

/// Per-stage p95 deltas of `b` relative to `a`, matched by function name.
fn compare(a: &RunReport, b: &RunReport) -> String {
    let stages = |r: &RunReport| -> BTreeMap<String, (String, Option<f64>)> {
        r.functions
            .iter()
            .filter(|f| f.kind == SpanKind::Handler)
            .map(|f| (f.name.clone(), (f.tier.clone(), f.p95_ms)))
            .collect()
    };
    let (sa, sb) = (stages(a), stages(b));
    let mut out = format!(
        "{} -> {}\n{:<20} {:>12} {:>12} {:>9}\n",
        a.scenario.name, b.scenario.name, "stage", "p95_a_ms", "p95_b_ms", "delta"
    );
    for (name, (tier_a, pa)) in &sa {
        let Some((tier_b, pb)) = sb.get(name) else { continue };
        out += &format!(
            "{:<20} {:>12} {:>12} {:>9}  ({tier_a} -> {tier_b})\n",
            name,
            fmt_num(*pa),
            fmt_num(*pb),
            delta(*pa, *pb)
        );
    }
    let (ea, eb) = (a.workflow.p95_end_to_end_ms, b.workflow.p95_end_to_end_ms);
    out += &format!(
        "{:<20} {:>12} {:>12} {:>9}\n",
        "end_to_end",
        fmt_num(ea),
        fmt_num(eb),
        delta(ea, eb)
    );
    out
}

fn report(dir: &Path, format: Format, other: Option<&Path>) -> u8 {
    let (r, _) = match read_report(dir) {
        Ok(v) => v,
        Err(code) => return code,
    };
    if let Some(other) = other {
        let (b, _) = match read_report(other) {
            Ok(v) => v,
            Err(code) => return code,
        };
        print!("{}", compare(&r, &b));
        return 0;
    }
    match format {
        Format::Table => print!("{}", table(&r)),
        Format::Json => print!("{}", r.render(ReportFormat::Json)),
        Format::Csv => print!("{}", r.render(ReportFormat::Csv)),
    }
    0
}
