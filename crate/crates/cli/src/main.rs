//! Command-line front end: scenario loading, single runs, the preset x
//! policy experiment matrix, preset export, validation and trace replay.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use schedsim_core::acceptance;
use schedsim_core::metrics;
use schedsim_core::scenario::{preset, PolicyKind, Scenario, ScenarioConfig, PRESET_NAMES};
use schedsim_core::trace::Trace;

const EXIT_CONFIG: u8 = 1;
const EXIT_DIAGNOSTIC: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "schedsim", version, about = "Mixed-workload CPU scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report.
    Run(RunArgs),
    /// Run a preset x policy grid and summarize it.
    Matrix(MatrixArgs),
    /// Print an embedded preset as JSON.
    ExportPreset(ExportArgs),
    /// Validate a scenario file without running it.
    Validate(ValidateArgs),
    /// Recompute a report from a trace file and its scenario.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file path or preset name.
    #[arg(long)]
    scenario: String,
    /// Override the scenario's policy (ufs|eevdf|idle|fifo|rr).
    #[arg(long)]
    policy: Option<String>,
    /// Override the RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the simulated duration, microseconds.
    #[arg(long)]
    duration: Option<u64>,
    /// Disable application-based scheduler hinting.
    #[arg(long)]
    no_hinting: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Report output path (JSON); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the event trace (CSV).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also write the report as flat CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Comma-separated preset names; all throughput presets by default.
    #[arg(long)]
    presets: Option<String>,
    /// Comma-separated policies; all by default.
    #[arg(long)]
    policies: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "42")]
    seeds: String,
    /// Directory for per-cell reports and the summary CSV.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Evaluate the acceptance checks and exit nonzero on failure.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct ExportArgs {
    /// Preset name.
    name: String,
    /// Policy to embed in the exported config.
    #[arg(long, default_value = "ufs")]
    policy: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Scenario file path or preset name.
    scenario: String,
}

#[derive(Args)]
struct ReplayArgs {
    /// Trace CSV produced by `run --trace`.
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Report output path (JSON); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Matrix(args) => cmd_matrix(args),
        Command::ExportPreset(args) => cmd_export(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Replay(args) => cmd_replay(args),
    }
}

fn load_config(args: &ScenarioArgs) -> Result<ScenarioConfig, String> {
    let policy = match &args.policy {
        None => None,
        Some(p) => Some(
            PolicyKind::parse(p).ok_or_else(|| format!("unknown policy {p:?} (ufs|eevdf|idle|fifo|rr)"))?,
        ),
    };
    let mut cfg = if Path::new(&args.scenario).exists() {
        let text = fs::read_to_string(&args.scenario)
            .map_err(|e| format!("{}: {e}", args.scenario))?;
        ScenarioConfig::from_json(&text).map_err(|e| format!("{}: {e}", args.scenario))?
    } else {
        preset(&args.scenario, policy.unwrap_or(PolicyKind::Ufs)).ok_or_else(|| {
            format!(
                "{:?} is neither a file nor a preset (presets: {})",
                args.scenario,
                PRESET_NAMES.join(", ")
            )
        })?
    };
    if let Some(p) = policy {
        cfg.policy = p;
    }
    if let Some(seed) = args.seed {
        cfg.engine.rng_seed = seed;
    }
    if let Some(duration) = args.duration {
        cfg.engine.duration_us = duration;
        cfg.engine.warmup_us = cfg.engine.warmup_us.min(duration.saturating_sub(1));
    }
    if args.no_hinting {
        cfg.hinting = false;
    }
    Ok(cfg)
}

fn validate(cfg: ScenarioConfig) -> Result<Scenario, String> {
    cfg.validate().map_err(|e| e.to_string())
}

/// Simulations run behind a panic barrier: an engine invariant violation
/// is reported as a diagnostic failure instead of a crash.
fn guarded_run(sc: &Scenario) -> Result<schedsim_core::RunOutput, String> {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| schedsim_core::run(sc))).map_err(
        |payload| {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "engine invariant violation".into());
            format!("simulation diagnostic failure: {msg}")
        },
    )
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), String> {
    let tmp = path.with_extension("tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        }
    }
    fs::write(&tmp, contents).map_err(|e| format!("{}: {e}", tmp.display()))?;
    fs::rename(&tmp, path).map_err(|e| format!("{}: {e}", path.display()))
}

fn fail(code: u8, msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let cfg = match load_config(&args.scenario) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let outputs = cfg.outputs.clone();
    let sc = match validate(cfg) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let out = match guarded_run(&sc) {
        Ok(o) => o,
        Err(e) => return fail(EXIT_DIAGNOSTIC, &e),
    };
    let report_path = args
        .out
        .or_else(|| outputs.as_ref().and_then(|o| o.report.clone().map(PathBuf::from)));
    let trace_path = args
        .trace
        .or_else(|| outputs.as_ref().and_then(|o| o.trace.clone().map(PathBuf::from)));
    if let Some(path) = trace_path {
        if let Err(e) = write_atomic(&path, &out.trace.to_csv()) {
            return fail(EXIT_DIAGNOSTIC, &e);
        }
    }
    if let Some(path) = args.csv {
        if let Err(e) = write_atomic(&path, &out.report.to_csv()) {
            return fail(EXIT_DIAGNOSTIC, &e);
        }
    }
    let json = out.report.to_json();
    match report_path {
        Some(path) => {
            if let Err(e) = write_atomic(&path, &json) {
                return fail(EXIT_DIAGNOSTIC, &e);
            }
            println!(
                "{} / {}: report written to {}",
                out.report.scenario,
                out.report.policy,
                path.display()
            );
        }
        None => print!("{json}"),
    }
    ExitCode::SUCCESS
}

fn parse_policies(arg: &Option<String>) -> Result<Vec<PolicyKind>, String> {
    match arg {
        None => Ok(PolicyKind::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .map(|p| {
                PolicyKind::parse(p.trim()).ok_or_else(|| format!("unknown policy {p:?}"))
            })
            .collect(),
    }
}

/// The IDLE mapping only differs from EEVDF where a background tier
/// exists, so idle cells are limited to presets that have one.
fn idle_applicable(name: &str) -> bool {
    matches!(
        name,
        "min_max" | "oversub_16" | "oversub_24" | "mixed_weights" | "solo_bound"
            | "lock_inversion" | "lock_inversion_baseline"
    )
}

fn cmd_matrix(args: MatrixArgs) -> ExitCode {
    let default_presets = [
        "solo_bursty",
        "solo_bound",
        "min_max",
        "fifty_fifty",
        "oversub_16",
        "oversub_24",
    ];
    let presets: Vec<String> = match &args.presets {
        None => default_presets.iter().map(|s| s.to_string()).collect(),
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
    };
    let policies = match parse_policies(&args.policies) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let seeds: Vec<u64> = match args
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<_, _>>()
    {
        Ok(s) => s,
        Err(_) => return fail(EXIT_CONFIG, "seeds must be integers"),
    };

    let mut summary = String::from(
        "preset,policy,seed,bursty_rps,bursty_vs_solo,bursty_p95_ms,bound_rps,bound_vs_solo,panicked\n",
    );
    let mut solo_bursty: std::collections::BTreeMap<(PolicyKind, u64), f64> = Default::default();
    let mut solo_bound: std::collections::BTreeMap<(PolicyKind, u64), f64> = Default::default();
    let mut failures = Vec::new();

    for preset_name in &presets {
        for &policy in &policies {
            if policy == PolicyKind::Idle && !idle_applicable(preset_name) {
                continue;
            }
            for &seed in &seeds {
                let Some(mut cfg) = preset(preset_name, policy) else {
                    failures.push(format!("unknown preset {preset_name:?}"));
                    continue;
                };
                cfg.engine.rng_seed = seed;
                let sc = match cfg.validate() {
                    Ok(s) => s,
                    Err(e) => {
                        failures.push(format!("{preset_name}/{policy}/{seed}: {e}"));
                        continue;
                    }
                };
                let out = match guarded_run(&sc) {
                    Ok(o) => o,
                    Err(e) => {
                        failures.push(format!("{preset_name}/{policy}/{seed}: {e}"));
                        continue;
                    }
                };
                let r = &out.report;
                let bursty: f64 = r
                    .groups
                    .iter()
                    .filter(|(n, _)| n.starts_with("ts_hi") || n.starts_with("ts_w"))
                    .map(|(_, g)| g.throughput_rps)
                    .sum();
                let bound: f64 = r
                    .groups
                    .iter()
                    .filter(|(n, _)| n.starts_with("bg_") || n.starts_with("ts_bound"))
                    .map(|(_, g)| g.throughput_rps)
                    .sum();
                if preset_name == "solo_bursty" {
                    solo_bursty.insert((policy, seed), bursty);
                }
                if preset_name == "solo_bound" {
                    solo_bound.insert((policy, seed), bound);
                }
                let vs = |v: f64, base: Option<&f64>| {
                    base.map(|b| format!("{:.4}", v / b)).unwrap_or_else(|| "-".into())
                };
                let p95 = r
                    .groups
                    .get("ts_hi")
                    .and_then(|g| g.p95_ms)
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into());
                summary.push_str(&format!(
                    "{},{},{},{:.3},{},{},{:.3},{},{}\n",
                    preset_name,
                    policy,
                    seed,
                    bursty,
                    vs(bursty, solo_bursty.get(&(policy, seed))),
                    p95,
                    bound,
                    vs(bound, solo_bound.get(&(policy, seed))),
                    r.panicked,
                ));
                if let Some(dir) = &args.out_dir {
                    let path = dir.join(format!("{preset_name}_{policy}_{seed}.json"));
                    if let Err(e) = write_atomic(&path, &r.to_json()) {
                        failures.push(e);
                    }
                }
            }
        }
    }

    if let Some(dir) = &args.out_dir {
        if let Err(e) = write_atomic(&dir.join("summary.csv"), &summary) {
            return fail(EXIT_DIAGNOSTIC, &e);
        }
        println!("summary written to {}", dir.join("summary.csv").display());
    } else {
        print!("{summary}");
    }
    for f in &failures {
        eprintln!("cell failed: {f}");
    }
    if !failures.is_empty() {
        return ExitCode::from(EXIT_DIAGNOSTIC);
    }

    if args.check {
        let mut all_pass = true;
        for result in acceptance::evaluate_all() {
            println!("{}", result.line());
            all_pass &= result.passed;
        }
        if !all_pass {
            return ExitCode::from(EXIT_CHECK);
        }
    }
    ExitCode::SUCCESS
}

fn cmd_export(args: ExportArgs) -> ExitCode {
    let Some(policy) = PolicyKind::parse(&args.policy) else {
        return fail(EXIT_CONFIG, &format!("unknown policy {:?}", args.policy));
    };
    let Some(cfg) = preset(&args.name, policy) else {
        return fail(
            EXIT_CONFIG,
            &format!("unknown preset {:?} (presets: {})", args.name, PRESET_NAMES.join(", ")),
        );
    };
    let json = cfg.to_json();
    match args.out {
        Some(path) => match write_atomic(&path, &json) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(EXIT_DIAGNOSTIC, &e),
        },
        None => {
            print!("{json}");
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
    }
}

fn cmd_validate(args: ValidateArgs) -> ExitCode {
    let wrapped = ScenarioArgs {
        scenario: args.scenario,
        policy: None,
        seed: None,
        duration: None,
        no_hinting: false,
    };
    let cfg = match load_config(&wrapped) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    match validate(cfg) {
        Ok(sc) => {
            println!(
                "ok: {} ({} cpus, {} cgroups, {} tasks, policy {})",
                sc.config.name,
                sc.config.cpus,
                sc.cgroups.len(),
                sc.config.tasks.len(),
                sc.config.policy
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_CONFIG, &e),
    }
}

fn cmd_replay(args: ReplayArgs) -> ExitCode {
    let cfg = match load_config(&args.scenario) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let sc = match validate(cfg) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let text = match fs::read_to_string(&args.trace) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, &format!("{}: {e}", args.trace.display())),
    };
    let trace = match Trace::from_csv(&text) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    let report = metrics::build_report(&trace, &sc);
    let json = report.to_json();
    match args.out {
        Some(path) => match write_atomic(&path, &json) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(EXIT_DIAGNOSTIC, &e),
        },
        None => {
            print!("{json}");
            ExitCode::SUCCESS
        }
    }
}
