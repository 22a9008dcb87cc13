use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use mfc::experiment::{
    content_hash, run_chattering_study, run_converse_limit, run_forward_limit, write_json,
    ExperimentConfig,
};
use mfc::measure::write_ensemble_file;
use mfc::model::{validate_growth, validate_lipschitz, CheckResult, ProbePlan};
use mfc::objective::estimate_n_objective;
use mfc::optimize::{optimize_policy, write_trace_jsonl};
use mfc::sim::simulate_nsystem;

#[derive(Parser)]
#[command(
    name = "mfc",
    version,
    about = "Mean-field control simulation and convergence experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Probe the growth and Lipschitz assumptions of the model.
    Validate(Common),
    /// Simulate the interacting system under the configured policy.
    Simulate(Common),
    /// Search the configured policy family.
    Optimize(Common),
    /// Distance of optimized n-state laws to the reference optimal law.
    ConvergeForward(Common),
    /// Epsilon-optimality of the fixed mean-field policy in the n-state system.
    ConvergeConverse(Common),
    /// Relaxed control against its chattered strict approximations.
    Chatter(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

/// Whether the run finished without skipped or failed parts.
struct Outcome {
    complete: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome { complete: true }) => ExitCode::SUCCESS,
        Ok(Outcome { complete: false }) => {
            eprintln!("run is partial; see manifest.json");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::from_file(&c.config)?;
    let cfg = match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(cfg)
}

fn manifest(
    command: &str,
    cfg: &ExperimentConfig,
    complete: bool,
    files: &[&str],
    result: Value,
) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config_hash": content_hash(cfg),
        "config": cfg,
        "complete": complete,
        "files": files,
        "result": result,
    })
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Validate(c) => validate(&c),
        Command::Simulate(c) => simulate(&c),
        Command::Optimize(c) => optimize(&c),
        Command::ConvergeForward(c) => converge(&c, true),
        Command::ConvergeConverse(c) => converge(&c, false),
        Command::Chatter(c) => chatter(&c),
    }
}

#[derive(Serialize)]
struct CheckRow<'a> {
    report: &'a str,
    name: &'a str,
    constant: Option<f64>,
    fitted_exponent: Option<f64>,
    allowed_exponent: Option<f64>,
    pass: bool,
}

fn validate(c: &Common) -> Result<Outcome> {
    let cfg = load(c)?;
    let model = cfg.build_model()?;
    let mut plan = ProbePlan::with_seed(cfg.seed);
    if let Some(s) = cfg.validate.samples_per_radius {
        plan.samples_per_radius = s;
    }
    if let Some(p) = cfg.validate.pairs_per_level {
        plan.pairs_per_level = p;
    }
    let growth = validate_growth(&model, &plan)?;
    let lipschitz = validate_lipschitz(&model, &plan)?;
    fn row<'a>(report: &'a str, k: &'a CheckResult) -> CheckRow<'a> {
        CheckRow {
            report,
            name: &k.name,
            constant: k.constant,
            fitted_exponent: k.fitted_exponent,
            allowed_exponent: k.allowed_exponent,
            pass: k.pass,
        }
    }
    let mut rows: Vec<CheckRow> = growth.checks.iter().map(|k| row("growth", k)).collect();
    rows.extend(lipschitz.checks.iter().map(|k| row("lipschitz", k)));
    write_csv(&rows, &c.out.join("checks.csv"))?;
    let m = manifest(
        "validate",
        &cfg,
        true,
        &["checks.csv"],
        json!({ "growth": growth, "lipschitz": lipschitz }),
    );
    write_json(&m, &c.out.join("manifest.json"))?;
    println!(
        "growth pass: {}  lipschitz pass: {}",
        growth.pass, lipschitz.pass
    );
    Ok(Outcome { complete: true })
}

fn simulate(c: &Common) -> Result<Outcome> {
    let cfg = load(c)?;
    let model = cfg.build_model()?;
    let policy = cfg.build_policy(&model)?;
    let out = simulate_nsystem(
        &model,
        &cfg.sim_config(cfg.sim.n_particles, cfg.seed),
        &policy,
    )?;
    out.write_summary_csv(BufWriter::new(File::create(c.out.join("particles.csv"))?))?;
    write_ensemble_file(&out.paths, c.out.join("ensemble.bin"))?;
    let complete = !out.blew_up();
    let objective = if complete {
        Some(estimate_n_objective(&model, &out)?)
    } else {
        None
    };
    let m = manifest(
        "simulate",
        &cfg,
        complete,
        &["particles.csv", "ensemble.bin"],
        json!({ "diagnostics": out.diagnostics, "objective": objective }),
    );
    write_json(&m, &c.out.join("manifest.json"))?;
    if let Some(o) = objective {
        println!("J_n = {} ± {}", o.value, o.std_error);
    }
    Ok(Outcome { complete })
}

#[derive(Serialize)]
struct HistoryRow {
    iteration: usize,
    best_value: f64,
}

fn optimize(c: &Common) -> Result<Outcome> {
    let cfg = load(c)?;
    let Some(o) = &cfg.optimize else {
        bail!("config has no [optimize] section");
    };
    let model = cfg.build_model()?;
    let init = cfg.build_policy(&model)?;
    let oc = cfg.optimize_config(o, cfg.seed);
    let sim = cfg.sim_config(cfg.sim.n_particles, cfg.seed);
    let r = optimize_policy(&model, &sim, &oc, &init, o.target)?;
    write_trace_jsonl(
        &r.trace,
        BufWriter::new(File::create(c.out.join("trace.jsonl"))?),
    )?;
    let rows: Vec<HistoryRow> = r
        .value_history
        .iter()
        .enumerate()
        .map(|(iteration, &best_value)| HistoryRow {
            iteration,
            best_value,
        })
        .collect();
    write_csv(&rows, &c.out.join("history.csv"))?;
    write_json(&r.policy, &c.out.join("policy.json"))?;
    let m = manifest(
        "optimize",
        &cfg,
        true,
        &["trace.jsonl", "history.csv", "policy.json"],
        json!({ "best": r.best, "best_train_value": r.best_train_value, "evaluations": r.evaluations }),
    );
    write_json(&m, &c.out.join("manifest.json"))?;
    println!(
        "best held-out value {} ± {}",
        r.best.value, r.best.std_error
    );
    Ok(Outcome { complete: true })
}

fn converge(c: &Common, forward: bool) -> Result<Outcome> {
    let cfg = load(c)?;
    let run = if forward {
        run_forward_limit(&cfg, &c.out)?
    } else {
        run_converse_limit(&cfg, &c.out)?
    };
    let name = if forward {
        "converge-forward"
    } else {
        "converge-converse"
    };
    let m = manifest(
        name,
        &cfg,
        !run.partial,
        &["records.csv", "records.jsonl"],
        json!({
            "reference": run.reference,
            "summary": run.summary,
            "w2_slope": run.w2_slope,
            "epsilon_slope": run.epsilon_slope,
            "coupling_slope": run.coupling_slope,
            "resumed_cells": run.resumed_cells,
        }),
    );
    write_json(&m, &c.out.join("manifest.json"))?;
    for s in &run.summary {
        println!(
            "n={:<6} eps={:?} w2_T={:?} gap={:?}",
            s.n, s.median_epsilon, s.median_w2_terminal, s.median_coupling_gap
        );
    }
    Ok(Outcome {
        complete: !run.partial,
    })
}

fn chatter(c: &Common) -> Result<Outcome> {
    let cfg = load(c)?;
    let study = run_chattering_study(&cfg)?;
    write_csv(&study.rows, &c.out.join("chatter.csv"))?;
    let m = manifest(
        "chatter",
        &cfg,
        true,
        &["chatter.csv"],
        serde_json::to_value(&study)?,
    );
    write_json(&m, &c.out.join("manifest.json"))?;
    for r in &study.rows {
        println!("2^{}: gap {:.3e} ± {:.3e}", r.exponent, r.gap, r.std_error);
    }
    Ok(Outcome { complete: true })
}
