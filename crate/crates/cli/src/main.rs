//! `koopctl`: scenario-driven runner for the Koopman optimal-control
//! pipeline.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use koopman_control::mapinv::{invert_map_with_condition, inversion_residual};
use koopman_control::scenario::{summary_csv, PointResult, Scenario, Session, SolveOutcome, SolverKind};
use koopman_control::{Error, PolyMap, Result};
use log::info;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "koopctl", version, about = "Koopman map-inversion optimal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one boundary-value problem.
    Solve(RunArgs),
    /// Solve every point of the scenario's grid block with one shared map.
    Grid(RunArgs),
    /// Solve for each time of flight in the sweep block.
    Sweep(RunArgs),
    /// Compare the scenario model against the compare block's model.
    Compare(RunArgs),
    /// Koopman operator utilities.
    Koopman {
        #[command(subcommand)]
        command: KoopmanCommand,
    },
    /// Invert a polynomial map given as JSON.
    Invert {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        order: Option<u32>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Solve with the STM closed form or shooting, bypassing the Koopman map.
    Oracle(RunArgs),
}

#[derive(Subcommand)]
enum KoopmanCommand {
    /// Build K and H for the scenario's augmented system.
    Build(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory, defaults to the scenario's `output` or `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the basis order.
    #[arg(long)]
    order: Option<u32>,
    /// koopman, stm-oracle or shooting.
    #[arg(long)]
    solver: Option<String>,
    /// Recorded in reports; only randomized tests consume it.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<(Scenario, PathBuf)> {
        let mut sc = Scenario::from_file(&self.scenario)?;
        if let Some(o) = self.order {
            sc.basis.max_order = o;
            sc.basis.trunc_order = None;
        }
        if let Some(s) = &self.solver {
            sc.solver = s.parse()?;
        }
        sc.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| sc.output.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out)?;
        Ok((sc, out))
    }

    fn session(&self) -> Session {
        let mut s = Session::new();
        s.seed = self.seed;
        s
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Reports without wall-clock timings, so reruns produce identical files.
fn split_timings(outcome: &SolveOutcome) -> Result<(Value, Value)> {
    let mut v = serde_json::to_value(&outcome.report)?;
    let t = v.as_object_mut().and_then(|o| o.remove("timings")).unwrap_or(Value::Null);
    Ok((v, t))
}

fn batch_json(results: &[PointResult]) -> Result<(Value, Value)> {
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    for r in results {
        match r {
            Ok(o) => {
                let (v, t) = split_timings(o)?;
                reports.push(v);
                timings.push(t);
            }
            Err(f) => {
                reports.push(json!({ "failure": f }));
                timings.push(Value::Null);
            }
        }
    }
    Ok((Value::Array(reports), Value::Array(timings)))
}

fn solve(args: &RunArgs) -> Result<()> {
    let (sc, out) = args.load()?;
    let outcome = args.session().solve(&sc)?;
    let (report, timings) = split_timings(&outcome)?;
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("timings.json"), &timings)?;
    outcome.trajectory.write_csv(&out.join("trajectory.csv"))?;
    let r = &outcome.report;
    println!("lambda0 = {:?}", r.lambda0);
    println!(
        "terminal error {:.3e} (relative {:.3e}), position error {:.3e}",
        r.terminal_error.absolute, r.terminal_error.relative, r.terminal_position_error
    );
    Ok(())
}

fn grid(args: &RunArgs) -> Result<()> {
    let (sc, out) = args.load()?;
    let results = args.session().grid(&sc)?;
    let (reports, timings) = batch_json(&results)?;
    write_json(&out.join("report.json"), &reports)?;
    write_json(&out.join("timings.json"), &timings)?;
    fs::write(out.join("summary.csv"), summary_csv(&results))?;
    for (i, r) in results.iter().enumerate() {
        if let Ok(o) = r {
            o.trajectory.write_csv(&out.join(format!("trajectory_{i}.csv")))?;
        }
    }
    let ok = results.iter().filter(|r| r.is_ok()).count();
    println!("{ok}/{} points solved", results.len());
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<()> {
    let (sc, out) = args.load()?;
    let sw = args.session().sweep(&sc)?;
    let (reports, timings) = batch_json(&sw.results)?;
    write_json(
        &out.join("report.json"),
        &json!({ "tf": sw.tf, "monotone_effort": sw.monotone_effort, "results": reports }),
    )?;
    write_json(&out.join("timings.json"), &timings)?;
    let mut csv = String::from("tf,status,effort,terminal_abs\n");
    for (tf, r) in sw.tf.iter().zip(&sw.results) {
        match r {
            Ok(o) => {
                let e: Vec<String> = o.report.control_effort.iter().map(|x| x.to_string()).collect();
                csv.push_str(&format!("{tf},ok,{},{}\n", e.join(" "), o.report.terminal_error.absolute));
            }
            Err(f) => csv.push_str(&format!("{tf},failed,,{}\n", f.error.replace([',', '\n'], ";"))),
        }
    }
    fs::write(out.join("summary.csv"), csv)?;
    println!("monotone effort: {}", sw.monotone_effort);
    Ok(())
}

fn compare(args: &RunArgs) -> Result<()> {
    let (sc, out) = args.load()?;
    let rep = args.session().compare(&sc)?;
    write_json(&out.join("report.json"), &rep)?;
    let mut csv = String::from("t,divergence\n");
    for (t, d) in rep.times.iter().zip(&rep.divergence) {
        csv.push_str(&format!("{t},{d}\n"));
    }
    fs::write(out.join("trajectory.csv"), csv)?;
    println!(
        "divergence final {:.3e} m, growing {}; truth model {}",
        rep.divergence_final, rep.divergence_growing, rep.truth
    );
    for c in &rep.controlled {
        match (c.truth_position_error, &c.error) {
            (Some(e), _) => println!("{}: truth position error {e:.3e} m", c.model),
            (None, err) => println!("{}: controlled solve failed: {}", c.model, err.as_deref().unwrap_or("")),
        }
    }
    Ok(())
}

fn koopman_build(args: &RunArgs) -> Result<()> {
    let (sc, out) = args.load()?;
    let build = args.session().build_koopman(&sc)?;
    write_json(&out.join("koopman.json"), &build.to_json())?;
    let d = build.model.diagnostics();
    println!(
        "basis {} functions, truncation residual {:.3e}, propagator {:?}",
        d.basis_size, d.max_truncation_residual, d.propagator
    );
    Ok(())
}

fn invert(map: &Path, order: Option<u32>, out: &Path) -> Result<()> {
    let forward: PolyMap = serde_json::from_str(&fs::read_to_string(map)?)?;
    let order = order.unwrap_or_else(|| forward.max_degree().max(1));
    let (inverse, condition) = invert_map_with_condition(&forward, order)?;
    let residual = inversion_residual(&forward, &inverse, order)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("inverse.json"), &inverse)?;
    write_json(
        &out.join("report.json"),
        &json!({ "trunc_order": order, "linear_condition": condition, "inversion_residual": residual }),
    )?;
    println!("inversion residual {residual:.3e}, linear condition {condition:.3e}");
    Ok(())
}

fn oracle(args: &RunArgs) -> Result<()> {
    let mut args = args.clone();
    let solver: SolverKind = args.solver.as_deref().unwrap_or("stm-oracle").parse()?;
    if solver == SolverKind::Koopman {
        return Err(Error::InvalidInput("oracle takes --solver stm-oracle or shooting".into()));
    }
    args.solver = Some(args.solver.unwrap_or_else(|| "stm-oracle".into()));
    solve(&args)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve(a) => solve(&a),
        Command::Grid(a) => grid(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Compare(a) => compare(&a),
        Command::Koopman {
            command: KoopmanCommand::Build(a),
        } => koopman_build(&a),
        Command::Invert { map, order, out } => invert(&map, order, &out),
        Command::Oracle(a) => oracle(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
