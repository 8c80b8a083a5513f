//! Scenario runner and report emitter.
//!
//! `linbft run <config>` executes one scenario and writes a line-delimited
//! JSON report plus a plain-text summary. `linbft sweep <config> --n ...`
//! runs the same scenario across participant counts and fits the measured
//! transmission volume against n.
//!
//! Exit codes: 0 success, 1 liveness failure (heights left unfinalized),
//! 2 invalid config or sweep, 3 safety violation (a bug detector: it should
//! never fire).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use linbft_core::metrics::{self, ComplexityReport};
use linbft_core::scenario::ScenarioConfig;
use linbft_core::simnet::{run_scenario, RunReport};

#[derive(Parser)]
#[command(name = "linbft", about = "LinBFT consensus simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report.
    Run(RunArgs),
    /// Run a scenario across several values of n and fit the complexity.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario config (TOML).
    config: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also print the plain-text summary to stdout.
    #[arg(long)]
    summary: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Base scenario config (TOML); its n is replaced per sweep entry.
    config: PathBuf,
    /// Participant counts, comma-separated (at least 4 distinct).
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<u32>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also print the plain-text summary to stdout.
    #[arg(long)]
    summary: bool,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg = ScenarioConfig::from_toml_str(&text).map_err(|e| e.to_string())?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let cfg = match load_config(&args.config, args.seed) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    // A run of x consecutive corrupted leaders has probability below 3^-x;
    // observing one longer than -log3(rho) is a negligible-probability event
    // worth surfacing.
    let rho_prefix_bound = (-cfg.rho.ln() / 3f64.ln()).ceil() as u32;
    let report = match run_scenario(cfg) {
        Ok(report) => report,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = write_run_report(&args.out, &report) {
        eprintln!("write error: {e}");
        return ExitCode::from(1);
    }
    if args.summary {
        print!("{}", run_summary(&report));
        if report.max_malicious_prefix > rho_prefix_bound {
            println!(
                "note: malicious-leader prefix {} exceeds the rho threshold {}",
                report.max_malicious_prefix, rho_prefix_bound
            );
        }
    }
    if !report.safety_ok {
        eprintln!("SAFETY VIOLATION detected; see report");
        return ExitCode::from(3);
    }
    if !report.all_heights_finalized || !report.liveness_ok {
        eprintln!("run incomplete: not all heights finalized");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

fn write_run_report(out: &Path, report: &RunReport) -> std::io::Result<()> {
    fs::create_dir_all(out)?;
    let mut lines = String::new();
    let meta = serde_json::json!({
        "record": "meta",
        "schema_version": report.schema_version,
        "n": report.n,
        "seed": report.seed,
        "num_heights": report.num_heights,
        "epoch_length": report.epoch_length,
    });
    lines.push_str(&meta.to_string());
    lines.push('\n');
    for h in &report.per_height {
        let mut v = serde_json::to_value(h).expect("height record serializes");
        v.as_object_mut()
            .expect("object")
            .insert("record".into(), "height".into());
        lines.push_str(&v.to_string());
        lines.push('\n');
    }
    let totals = serde_json::json!({
        "record": "totals",
        "total_volume": report.total_volume,
        "total_body_units": report.total_body_units,
        "setup_units": report.setup_units,
        "dkg_attempts": report.dkg_attempts,
        "dkg_failures": report.dkg_failures,
        "epochs_completed": report.epochs_completed,
        "safety_ok": report.safety_ok,
        "liveness_ok": report.liveness_ok,
        "all_heights_finalized": report.all_heights_finalized,
        "max_malicious_prefix": report.max_malicious_prefix,
        "slashes": serde_json::to_value(&report.slashes).expect("slashes serialize"),
        "violations": report.violations,
        "final_supply": report.final_supply,
        "confiscated": report.confiscated,
    });
    lines.push_str(&totals.to_string());
    lines.push('\n');
    fs::write(out.join("report.jsonl"), lines)?;
    fs::write(out.join("summary.txt"), run_summary(report))?;
    Ok(())
}

fn run_summary(report: &RunReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "linbft run: n={} seed={} heights={}\n",
        report.n, report.seed, report.num_heights
    ));
    let finalized = report
        .per_height
        .iter()
        .filter(|h| h.all_finalized_at > 0)
        .count();
    s.push_str(&format!(
        "safety: {}  liveness: {}  finalized: {}/{}\n",
        if report.safety_ok { "ok" } else { "VIOLATED" },
        if report.liveness_ok { "ok" } else { "FAILED" },
        finalized, report.num_heights
    ));
    s.push_str(&format!(
        "volume: {} units (+{} body, +{} setup)  dkg: {}/{} failed\n",
        report.total_volume,
        report.total_body_units,
        report.setup_units,
        report.dkg_failures,
        report.dkg_attempts
    ));
    let rounds: Vec<u32> = report.per_height.iter().map(|h| h.rounds_used).collect();
    let max_rounds = rounds.iter().copied().max().unwrap_or(0);
    let view_changes: u32 = rounds.iter().map(|r| r.saturating_sub(1)).sum();
    s.push_str(&format!(
        "rounds: max {}  view changes: {}  max malicious prefix: {}\n",
        max_rounds, view_changes, report.max_malicious_prefix
    ));
    if !report.slashes.is_empty() {
        s.push_str(&format!("slashes: {}\n", report.slashes.len()));
        for sl in &report.slashes {
            s.push_str(&format!(
                "  node {} at height {}: {}\n",
                sl.node, sl.height, sl.kind
            ));
        }
    }
    for v in &report.violations {
        s.push_str(&format!("violation: {v}\n"));
    }
    s
}

fn cmd_sweep(args: SweepArgs) -> ExitCode {
    let base = match load_config(&args.config, args.seed) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut distinct = args.n.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        eprintln!("config error: {}", metrics::FitError::DegenerateSweep);
        return ExitCode::from(2);
    }

    let mut per_height_volume = Vec::new();
    let mut amortized = Vec::new();
    let mut baseline = Vec::new();
    let mut max_prefix = 0u32;
    let mut degraded = false;
    let mut any_bad = false;
    for n in &distinct {
        let mut cfg = base.clone();
        cfg.n = *n;
        cfg.epoch_length = 0; // resolve to 4n per entry
        let report = match run_scenario(cfg) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("config error at n={n}: {e}");
                return ExitCode::from(2);
            }
        };
        if !report.safety_ok {
            eprintln!("SAFETY VIOLATION at n={n}");
            return ExitCode::from(3);
        }
        any_bad |= !report.all_heights_finalized;
        let heights = report.per_height.len().max(1) as u64;
        let avg = report.total_volume / heights;
        per_height_volume.push((*n as usize, avg));
        amortized.push((
            *n as usize,
            avg as f64 + report.setup_units as f64 / report.epoch_length as f64,
        ));
        baseline.push((*n as usize, avg + 2 * (*n as u64) * (*n as u64 - 1)));
        max_prefix = max_prefix.max(report.max_malicious_prefix);
        degraded |= report.per_height.iter().any(|h| h.fallback);
    }

    let slope_fit = match metrics::fit_complexity(&per_height_volume) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let baseline_slope = match metrics::fit_complexity(&baseline) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let report = ComplexityReport {
        schema_version: linbft_core::scenario::SCHEMA_VERSION,
        per_height_volume,
        amortized_per_block: amortized,
        slope_fit,
        baseline_volume: baseline,
        baseline_slope,
        max_malicious_prefix: max_prefix,
        dkg_degraded: degraded,
    };
    if let Err(e) = write_sweep_report(&args.out, &report) {
        eprintln!("write error: {e}");
        return ExitCode::from(1);
    }
    if args.summary {
        print!("{}", sweep_summary(&report));
    }
    if any_bad {
        eprintln!("sweep incomplete: some runs did not finalize all heights");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

fn write_sweep_report(out: &Path, report: &ComplexityReport) -> std::io::Result<()> {
    fs::create_dir_all(out)?;
    let mut line = serde_json::to_string(report).expect("report serializes");
    line.push('\n');
    fs::write(out.join("complexity.json"), line)?;
    fs::write(out.join("sweep_summary.txt"), sweep_summary(report))?;
    Ok(())
}

fn sweep_summary(report: &ComplexityReport) -> String {
    let mut s = String::new();
    s.push_str("linbft sweep\n");
    s.push_str("  n      vol/height   amortized     baseline\n");
    for ((n, v), ((_, a), (_, b))) in report.per_height_volume.iter().zip(
        report
            .amortized_per_block
            .iter()
            .zip(report.baseline_volume.iter()),
    ) {
        s.push_str(&format!("  {n:<6} {v:<12} {a:<13.2} {b}\n"));
    }
    s.push_str(&format!(
        "slope: {:.4} (baseline {:.4}){}\n",
        report.slope_fit,
        report.baseline_slope,
        if report.dkg_degraded {
            "  [degraded: share-list fallback active]"
        } else {
            ""
        }
    ));
    s
}
